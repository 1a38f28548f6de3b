"""Five-seed validation of the adaptation efficacy criteria (scratch)."""
import json
import time

import numpy as np

from dusalab import gmm
from dusalab.worlds import make_world, corrupt, CORRUPTION_KINDS
from dusalab.models import train_classifier, predict
from dusalab.diffusion import linear_schedule, train_denoiser
from dusalab.dusa import adapt_step
from dusalab.baselines import source_only_step
from dusalab.csm import BudgetConfig
from dusalab.optim import Adam
from dusalab.rng import Rng
import copy

SAMPLES = 4096
BATCH = 64
results = {}

def stream_for(world, kinds, seed):
    rng = Rng(seed)
    out = []
    for kind in kinds:
        xr, yr = gmm.sample(world.mixture, SAMPLES, rng.child(f"x-{kind}"))
        xc = corrupt(xr, kind, 3, world.corruption_ctx, rng.child(f"c-{kind}"))
        out.append((kind, xc, yr))
    return out

def run_method(world, clf0, dn0, sched, stream, method, t=100, reset_each=True):
    accs_by_kind = {}
    clf, dn = copy.deepcopy(clf0), copy.deepcopy(dn0)
    opt = Adam(lr=3e-3)
    for kind, X, Y in stream:
        if reset_each:
            clf, dn = copy.deepcopy(clf0), copy.deepcopy(dn0)
            opt = Adam(lr=3e-3)
        accs = []
        nb = 0
        for bi in range(0, len(X), BATCH):
            xb, yb = X[bi:bi+BATCH], Y[bi:bi+BATCH]
            if method == "source":
                rep = source_only_step(xb, clf)
            else:
                mode = "dusa_u" if method == "dusa_u" else "dusa"
                rep = adapt_step(xb, clf, dn, sched, t, BudgetConfig(4, 2), mode,
                                 opt, Rng(31_000 + 977 * nb))
            accs.append((rep.predictions == yb).mean())
            nb += 1
        accs_by_kind[kind] = float(np.mean(accs))
    return accs_by_kind

t_all = time.time()
for seed in range(5):
    t0 = time.time()
    w = make_world(8, 8, 1000 + seed)
    clf = train_classifier(w.x_train, w.y_train, 8, Rng(2000 + seed))
    sched = linear_schedule(1000, 1e-4, 0.1)
    dn = train_denoiser(w.x_train, w.y_train, 8, sched, Rng(3000 + seed), noise_aug=1.5)
    clean = float((predict(clf.logits(w.x_test)) == w.y_test).mean())

    one = stream_for(w, ["add_noise"], 4000 + seed)
    r = {"clean": clean}
    r["src_noise"] = run_method(w, clf, dn, sched, one, "source")["add_noise"]
    r["dusa_noise"] = run_method(w, clf, dn, sched, one, "dusa")["add_noise"]
    r["dusa_u_noise"] = run_method(w, clf, dn, sched, one, "dusa_u")["add_noise"]
    r["dusa_t10"] = run_method(w, clf, dn, sched, one, "dusa", t=10)["add_noise"]
    r["dusa_t900"] = run_method(w, clf, dn, sched, one, "dusa", t=900)["add_noise"]

    cont = stream_for(w, list(CORRUPTION_KINDS), 5000 + seed)
    r["src_cont"] = run_method(w, clf, dn, sched, cont, "source")
    r["dusa_cont"] = run_method(w, clf, dn, sched, cont, "dusa", reset_each=False)
    results[seed] = r
    print(f"seed {seed} ({time.time()-t0:.0f}s): clean={clean:.3f} src={r['src_noise']:.3f} "
          f"dusa={r['dusa_noise']:.3f}({100*(r['dusa_noise']-r['src_noise']):+.1f}) "
          f"dusa_u={r['dusa_u_noise']:.3f} t10={r['dusa_t10']:.3f} t900={r['dusa_t900']:.3f}", flush=True)
    print(f"   continual src={np.mean(list(r['src_cont'].values())):.3f} "
          f"dusa={np.mean(list(r['dusa_cont'].values())):.3f} per-kind={ {k: round(v,3) for k,v in r['dusa_cont'].items()} }", flush=True)

g6 = np.mean([100*(results[s]["dusa_noise"] - results[s]["src_noise"]) for s in results])
gu = np.mean([100*(results[s]["dusa_noise"] - results[s]["dusa_u_noise"]) for s in results])
g7a = np.mean([100*(results[s]["dusa_noise"] - results[s]["dusa_t10"]) for s in results])
g7b = np.mean([100*(results[s]["dusa_noise"] - results[s]["dusa_t900"]) for s in results])
g8 = np.mean([100*(np.mean(list(results[s]["dusa_cont"].values())) - np.mean(list(results[s]["src_cont"].values()))) for s in results])
min_seg = min(min(results[s]["dusa_cont"].values()) for s in results)
print(f"\nCRIT6 dusa-src: {g6:+.1f} (need >= +5) | dusa - dusa_u: {gu:+.1f} (need <= 3)")
print(f"CRIT7 t100-t10: {g7a:+.1f}, t100-t900: {g7b:+.1f} (each need >= +1)")
print(f"CRIT8 continual gain: {g8:+.1f} (need >= +3), min segment {min_seg:.3f} (need >= 0.175)")
print(f"total {time.time()-t_all:.0f}s")
with open("/tmp/validate_results.json", "w") as fh:
    json.dump(results, fh, indent=1)
