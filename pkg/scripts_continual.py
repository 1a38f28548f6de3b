"""Continual-protocol lr variants (scratch)."""
import sys
import time
import copy

import numpy as np

from dusalab import gmm
from dusalab.worlds import make_world, corrupt, CORRUPTION_KINDS
from dusalab.models import train_classifier, predict
from dusalab.diffusion import linear_schedule, train_denoiser
from dusalab.dusa import adapt_step
from dusalab.csm import BudgetConfig
from dusalab.optim import Adam
from dusalab.rng import Rng

SAMPLES = 4096
BATCH = 64
lrs = [2e-3, 3e-3]
res = {lr: [] for lr in lrs}
res["noise_gain"] = {lr: [] for lr in lrs}
for seed in range(5):
    t0 = time.time()
    w = make_world(8, 8, 1000 + seed)
    clf0 = train_classifier(w.x_train, w.y_train, 8, Rng(2000 + seed))
    sched = linear_schedule(1000, 1e-4, 0.1)
    dn0 = train_denoiser(w.x_train, w.y_train, 8, sched, Rng(3000 + seed), noise_aug=1.5)
    rng = Rng(5000 + seed)
    stream = []
    for kind in CORRUPTION_KINDS:
        xr, yr = gmm.sample(w.mixture, SAMPLES, rng.child(f"x-{kind}"))
        stream.append((kind, corrupt(xr, kind, 3, w.corruption_ctx, rng.child(f"c-{kind}")), yr))
    src = np.mean([np.mean([(predict(clf0.logits(X[b:b+BATCH]))==Y[b:b+BATCH]).mean()
                            for b in range(0, SAMPLES, BATCH)]) for _, X, Y in stream])
    line = f"seed {seed}: src={src:.3f}"
    for lr in lrs:
        clf, dn = copy.deepcopy(clf0), copy.deepcopy(dn0)
        opt = Adam(lr=lr)
        per = []
        nb = 0
        for kind, X, Y in stream:
            accs = []
            for b in range(0, SAMPLES, BATCH):
                xb, yb = X[b:b+BATCH], Y[b:b+BATCH]
                rep = adapt_step(xb, clf, dn, sched, 100, BudgetConfig(4, 2), "dusa",
                                 opt, Rng(31000 + 977 * nb))
                accs.append((rep.predictions == yb).mean())
                nb += 1
            per.append(np.mean(accs))
        gain = 100 * (np.mean(per) - src)
        res[lr].append(gain)
        line += f" | lr={lr}: {np.mean(per):.3f} ({gain:+.1f}) min_seg={min(per):.3f}"
    print(line + f" ({time.time()-t0:.0f}s)", flush=True)
for lr in lrs:
    print(f"lr={lr}: continual mean gain {np.mean(res[lr]):+.2f} per-seed {np.round(res[lr],1)}")
