"""Discriminative models under adaptation.

A K-way MLP classifier over vectors and a dense labeler that applies a
shared per-pixel MLP (pixel features plus a fixed positional code) at
every cell of a small grid.  Both are trained here with cross-entropy;
at adaptation time every parameter is trainable.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .nets import grid_positional_encoding, init_mlp, mlp_forward
from .rng import Rng

__all__ = [
    "Classifier",
    "classify",
    "predict",
    "train_classifier",
    "DenseLabeler",
    "dense_classify",
    "train_dense_labeler",
    "mean_iou",
]


class Classifier:
    """MLP mapping a d-vector to K logits (zero-initialized last layer)."""

    def __init__(self, dim: int, n_classes: int, rng: Rng, hidden=(64, 64)):
        self.dim = dim
        self.n_classes = n_classes
        self.hidden = tuple(hidden)
        self.params = init_mlp([dim, *hidden, n_classes], rng)
        self.loss_history: list[float] = []
        self.train_accuracy: float | None = None

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    def config(self) -> dict:
        return {"dim": self.dim, "n_classes": self.n_classes, "hidden": list(self.hidden)}

    def forward(self, params, x) -> ad.Tensor:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[-1] != self.dim:
            raise ValueError(f"input dimension {x.shape[-1]} != {self.dim}")
        return mlp_forward(params, ad.constant(x), self.n_layers)

    def logits(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = self.forward(self.params, x).value
        return out[0] if x.ndim == 1 else out


def classify(clf: Classifier, x) -> np.ndarray:
    """Deterministic logits for one input or a batch."""
    return clf.logits(x)


def predict(logits) -> int | np.ndarray:
    """Argmax class; ties break toward the lowest index."""
    logits = np.asarray(logits)
    out = np.argmax(logits, axis=-1)
    return int(out) if out.ndim == 0 else out


def _cross_entropy(logits: ad.Tensor, labels: np.ndarray) -> ad.Tensor:
    lse = ad.logsumexp(logits, axis=-1)
    picked = ad.take_per_row(logits, labels)
    return (lse - picked).mean()


def train_classifier(x: np.ndarray, y: np.ndarray, n_classes: int, rng: Rng,
                     epochs: int = 150, batch: int = 128, lr: float = 1e-3,
                     hidden=(64, 64), label_smoothing: float = 0.1) -> Classifier:
    """Cross-entropy training with label smoothing.

    Smoothing keeps logit norms calibrated (a few units instead of tens),
    which matters downstream: normalized-logit adaptation objectives damp
    gradients by 1/||z||, so an overconfident source model adapts an
    order of magnitude slower.  Records loss history and train accuracy.
    """
    from .optim import Adam, cosine_lr

    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.size == 0:
        raise ValueError("training set is empty")
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError("labels out of range")
    if not 0.0 <= label_smoothing < 1.0:
        raise ValueError("label_smoothing must be in [0, 1)")
    clf = Classifier(x.shape[1], n_classes, rng.child("init"), hidden=hidden)
    opt = Adam(lr=lr)
    data_rng = rng.child("batches")
    n = len(x)
    off = label_smoothing / n_classes
    on = 1.0 - label_smoothing + off
    for epoch in range(epochs):
        opt.lr = cosine_lr(epoch, epochs, lr, lr * 0.01)
        order = data_rng.gen.permutation(n)
        losses = []
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            xb, yb = x[idx], y[idx]
            target = np.full((len(idx), n_classes), off)
            target[np.arange(len(idx)), yb] = on

            def loss_fn(p):
                z = clf.forward(p, xb)
                lse = ad.logsumexp(z, axis=-1)
                return (lse - (z * ad.constant(target)).sum(axis=-1)).mean()

            loss, grads = ad.value_and_grad(loss_fn, clf.params)
            losses.append(loss)
            clf.params = opt.step(clf.params, grads)
        clf.loss_history.append(float(np.mean(losses)))
    clf.train_accuracy = float((predict(clf.logits(x)) == y).mean())
    return clf


class DenseLabeler:
    """Shared per-pixel MLP over an H x W grid of c-dim pixel features.

    Each cell's input is its feature vector concatenated with a fixed
    sinusoidal positional code; the same weights label every cell.
    """

    def __init__(self, height: int, width: int, channels: int, n_classes: int,
                 rng: Rng, hidden=(64, 64), pos_dim: int = 8):
        self.height = height
        self.width = width
        self.channels = channels
        self.n_classes = n_classes
        self.hidden = tuple(hidden)
        self.pos_dim = pos_dim
        self.pos = grid_positional_encoding(height, width, pos_dim)
        self.params = init_mlp([channels + pos_dim, *hidden, n_classes], rng)
        self.loss_history: list[float] = []

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    def config(self) -> dict:
        return {
            "height": self.height, "width": self.width, "channels": self.channels,
            "n_classes": self.n_classes, "hidden": list(self.hidden),
            "pos_dim": self.pos_dim,
        }

    def forward(self, params, images) -> ad.Tensor:
        """Per-pixel logits; images (H,W,c) or (B,H,W,c) -> (..., H, W, K)."""
        images = np.asarray(images, dtype=np.float64)
        single = images.ndim == 3
        if single:
            images = images[None]
        b, h, w, c = images.shape
        if (h, w, c) != (self.height, self.width, self.channels):
            raise ValueError("grid dimensions do not match the model")
        pos = np.broadcast_to(self.pos, (b, h, w, self.pos_dim))
        rows = np.concatenate([images, pos], axis=-1).reshape(b * h * w, c + self.pos_dim)
        out = mlp_forward(params, ad.constant(rows), self.n_layers)
        out = out.reshape((b, h, w, self.n_classes))
        return out

    def logits(self, images) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        out = self.forward(self.params, images).value
        return out[0] if images.ndim == 3 else out


def dense_classify(dl: DenseLabeler, image) -> np.ndarray:
    """Per-pixel logits for one grid or a batch of grids."""
    return dl.logits(image)


def train_dense_labeler(images: np.ndarray, label_maps: np.ndarray, n_classes: int,
                        rng: Rng, epochs: int = 30, batch: int = 32,
                        lr: float = 1e-3, hidden=(64, 64)) -> DenseLabeler:
    """Per-pixel cross-entropy over all cells of each grid."""
    from .optim import Adam, cosine_lr

    images = np.asarray(images, dtype=np.float64)
    label_maps = np.asarray(label_maps, dtype=np.int64)
    if images.size == 0:
        raise ValueError("training set is empty")
    n, h, w, c = images.shape
    dl = DenseLabeler(h, w, c, n_classes, rng.child("init"), hidden=hidden)
    opt = Adam(lr=lr)
    data_rng = rng.child("batches")
    for epoch in range(epochs):
        opt.lr = cosine_lr(epoch, epochs, lr, lr * 0.01)
        order = data_rng.gen.permutation(n)
        losses = []
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            xb = images[idx]
            yb = label_maps[idx].reshape(-1)

            def loss_fn(p):
                logits = dl.forward(p, xb).reshape((-1, n_classes))
                return _cross_entropy(logits, yb)

            loss, grads = ad.value_and_grad(loss_fn, dl.params)
            losses.append(loss)
            dl.params = opt.step(dl.params, grads)
        dl.loss_history.append(float(np.mean(losses)))
    return dl


def mean_iou(pred_maps, true_maps, n_classes: int) -> float:
    """Mean intersection-over-union over classes present in either map."""
    pred = np.asarray(pred_maps).reshape(-1)
    true = np.asarray(true_maps).reshape(-1)
    ious = []
    for k in range(n_classes):
        inter = np.sum((pred == k) & (true == k))
        union = np.sum((pred == k) | (true == k))
        if union > 0:
            ious.append(inter / union)
    return float(np.mean(ious)) if ious else 0.0
