"""Segmentation criterion validation (scratch)."""
import sys
import time

import numpy as np

from dusalab.worlds import make_seg_world, corrupt
from dusalab.models import train_dense_labeler, mean_iou
from dusalab.diffusion import linear_schedule, train_denoiser
from dusalab.dusa import adapt_step_seg
from dusalab.optim import Adam
from dusalab.rng import Rng

SAMPLES = int(sys.argv[1]) if len(sys.argv) > 1 else 2048
BATCH = 32
gains = []
for seed in range(5):
    t0 = time.time()
    w = make_seg_world(1000 + seed)
    dl = train_dense_labeler(w.images_train, w.labels_train, 4, Rng(2000 + seed))
    sched = linear_schedule(1000, 1e-4, 0.1)
    flat = w.images_train.reshape(len(w.images_train), -1)
    pick = Rng(2500 + seed)
    rows = pick.integers(0, 8, len(flat))
    cols = pick.integers(0, 8, len(flat))
    glabels = w.labels_train[np.arange(len(flat)), rows, cols]
    dn = train_denoiser(flat, glabels, 4, sched, Rng(3000 + seed), epochs=60,
                        hidden=(128, 128), noise_aug=1.5)
    clean_pred = np.argmax(dl.logits(w.images_test), axis=-1)
    clean_miou = mean_iou(clean_pred, w.labels_test, 4)

    rng = Rng(4000 + seed)
    imgs, labs = w.sample(SAMPLES, rng.child("draw"))
    flat_t = corrupt(imgs.reshape(SAMPLES, -1), "add_noise", 3, w.corruption_ctx,
                     rng.child("corrupt"))
    imgs_c = flat_t.reshape(imgs.shape)

    # source-only
    src_scores = []
    for bi in range(0, SAMPLES, BATCH):
        xb, yb = imgs_c[bi:bi+BATCH], labs[bi:bi+BATCH]
        pred = np.argmax(dl.logits(xb), axis=-1)
        src_scores.append(mean_iou(pred, yb, 4))
    src = float(np.mean(src_scores))

    # dusa-seg
    import copy
    dl2, dn2 = copy.deepcopy(dl), copy.deepcopy(dn)
    opt = Adam(lr=3e-3)
    scores = []
    nb = 0
    for bi in range(0, SAMPLES, BATCH):
        xb, yb = imgs_c[bi:bi+BATCH], labs[bi:bi+BATCH]
        rep = adapt_step_seg(xb, dl2, dn2, sched, 100, 20, opt, Rng(31000 + 977 * nb))
        scores.append(mean_iou(rep.predictions, yb, 4))
        nb += 1
    dusa = float(np.mean(scores))
    gains.append(100 * (dusa - src))
    print(f"seed {seed} ({time.time()-t0:.0f}s): clean mIoU={clean_miou:.3f} "
          f"src={src:.3f} dusa={dusa:.3f} gain={100*(dusa-src):+.1f} "
          f"lastq={np.mean(scores[-len(scores)//4:]):.3f}", flush=True)
print(f"CRIT10 mean gain: {np.mean(gains):+.1f} (need >= +2)")
