"""Synthetic source worlds and the target-corruption registry.

The classification world is a well-separated labeled Gaussian mixture
whose exact form is retained as the oracle; the segmentation world is a
grid of Voronoi-partitioned cells with class-prototype pixel features.
Corruptions are deterministic per (kind, severity) given direction-like
quantities drawn once per world seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gmm
from .rng import Rng

__all__ = [
    "CorruptionContext",
    "World",
    "SegWorld",
    "make_world",
    "make_seg_world",
    "CORRUPTION_KINDS",
    "severity_value",
    "corrupt",
]

# severity index 1..5 maps to these parameter values (normative registry)
_SEVERITY_TABLE = {
    "add_noise": (0.5, 1.0, 1.5, 2.0, 2.5),      # noise std
    "mean_shift": (0.8, 1.6, 2.4, 3.2, 4.0),     # shift length along u
    "cov_scale": (1.2, 1.4, 1.6, 1.8, 2.0),      # deviation scale factor
    "rotate": (6.0, 12.0, 18.0, 24.0, 30.0),     # degrees in a fixed 2-plane
    "feature_drop": (1, 2, 3, 4, 5),             # zeroed coordinates (<= d-1)
}

CORRUPTION_KINDS = tuple(_SEVERITY_TABLE)


def severity_value(kind: str, severity: int):
    if kind not in _SEVERITY_TABLE:
        raise ValueError(f"unknown corruption kind '{kind}'")
    if severity not in (1, 2, 3, 4, 5):
        raise ValueError("severity must be in 1..5")
    return _SEVERITY_TABLE[kind][severity - 1]


@dataclass(frozen=True)
class CorruptionContext:
    """World-fixed quantities the corruption registry relies on."""

    shift_direction: np.ndarray   # unit vector for mean_shift
    plane_a: np.ndarray           # orthonormal pair spanning the rotation plane
    plane_b: np.ndarray
    drop_order: np.ndarray        # fixed coordinate permutation for feature_drop
    data_mean: np.ndarray         # class-agnostic mean for cov_scale


def _make_corruption_context(dim: int, data_mean: np.ndarray, rng: Rng) -> CorruptionContext:
    u = rng.normal(dim)
    u /= np.linalg.norm(u)
    if dim >= 2:
        a = rng.normal(dim)
        a /= np.linalg.norm(a)
        b = rng.normal(dim)
        b -= (b @ a) * a
        b /= np.linalg.norm(b)
    else:
        a = b = np.zeros(dim)
    drop_order = rng.gen.permutation(dim)
    return CorruptionContext(u, a, b, drop_order, np.asarray(data_mean, dtype=np.float64))


def corrupt(x, kind: str, severity: int, ctx: CorruptionContext, rng: Rng | None = None):
    """Apply one corruption at the given severity to points ``x``.

    ``add_noise`` draws fresh Gaussian noise from ``rng``; all other kinds
    are deterministic maps fixed by the context.
    """
    value = severity_value(kind, severity)
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    if kind == "add_noise":
        if rng is None:
            raise ValueError("add_noise requires an rng")
        return x + value * rng.normal(x.shape)
    if kind == "mean_shift":
        return x + value * ctx.shift_direction
    if kind == "cov_scale":
        return ctx.data_mean + value * (x - ctx.data_mean)
    if kind == "rotate":
        if d < 2:
            raise ValueError("rotate requires dimension >= 2")
        theta = np.deg2rad(value)
        a, b = ctx.plane_a, ctx.plane_b
        ca = x @ a
        cb = x @ b
        ra = ca * np.cos(theta) - cb * np.sin(theta)
        rb = ca * np.sin(theta) + cb * np.cos(theta)
        return x + np.outer(ra - ca, a) + np.outer(rb - cb, b) if x.ndim == 2 \
            else x + (ra - ca) * a + (rb - cb) * b
    if kind == "feature_drop":
        out = x.copy()
        keep = min(int(value), d - 1)
        out[..., ctx.drop_order[:keep]] = 0.0
        return out
    raise ValueError(f"unknown corruption kind '{kind}'")


@dataclass
class World:
    """Classification world: the oracle mixture plus labeled splits."""

    mixture: gmm.Mixture
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    seed: int
    corruption_ctx: CorruptionContext

    @property
    def dim(self) -> int:
        return self.mixture.dim

    @property
    def n_classes(self) -> int:
        return self.mixture.n_classes


def _separated_sphere_means(n_classes: int, dim: int, rng: Rng,
                            radius: float = 4.0, min_dist: float = 4.0) -> np.ndarray:
    """Means uniform on the radius-4 sphere, resampled until every pair is
    at least ``min_dist`` apart (keeps the source task Bayes-separable)."""
    for _ in range(10_000):
        raw = rng.normal((n_classes, dim))
        means = radius * raw / np.linalg.norm(raw, axis=1, keepdims=True)
        dists = np.linalg.norm(means[:, None] - means[None, :], axis=-1)
        dists[np.diag_indices(n_classes)] = np.inf
        if dists.min() >= min_dist:
            return means
    raise RuntimeError("could not place separated class means")


def make_world(n_classes: int, dim: int, seed: int,
               n_train: int = 8000, n_test: int = 2000,
               class_scales: tuple = (0.45, 1.25)) -> World:
    """Build the fixed source mixture and i.i.d. labeled splits.

    Components are isotropic with per-class standard deviations cycling
    through ``class_scales`` and uniform weights; the mixture is kept as
    the exact oracle for scores, posteriors and noise predictors.

    The default scales are deliberately heterogeneous: with equal
    covariances, adding isotropic target noise preserves the optimal
    decision rule, leaving a frozen source model nothing to recover.
    Mixed tight/wide classes make corruption genuinely shift the optimal
    rule, which is the regime adaptation methods are meant for.
    """
    if n_classes < 2 or dim < 1:
        raise ValueError("need n_classes >= 2 and dim >= 1")
    rng = Rng(seed)
    means = _separated_sphere_means(n_classes, dim, rng.child("means"))
    comps = tuple(
        gmm.Gaussian(mu, class_scales[y % len(class_scales)] ** 2 * np.eye(dim))
        for y, mu in enumerate(means)
    )
    mixture = gmm.Mixture(tuple(range(n_classes)), comps,
                          np.full(n_classes, 1.0 / n_classes))
    x_train, y_train = gmm.sample(mixture, n_train, rng.child("train"))
    x_test, y_test = gmm.sample(mixture, n_test, rng.child("test"))
    ctx = _make_corruption_context(dim, x_train.mean(axis=0), rng.child("corruption"))
    return World(mixture, x_train, y_train, x_test, y_test, seed, ctx)


@dataclass
class SegWorld:
    """Segmentation world: grids of Voronoi cells with prototype features."""

    prototypes: np.ndarray        # (K, c) class feature prototypes
    feature_noise: np.ndarray     # (K,) per-class feature noise std
    height: int
    width: int
    channels: int
    n_classes: int
    images_train: np.ndarray      # (N, H, W, c)
    labels_train: np.ndarray      # (N, H, W)
    images_test: np.ndarray
    labels_test: np.ndarray
    seed: int
    corruption_ctx: CorruptionContext

    @property
    def flat_dim(self) -> int:
        return self.height * self.width * self.channels

    def sample(self, n: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
        return _sample_seg_grids(self, n, rng)


def _sample_seg_grids(world: SegWorld, n: int, rng: Rng):
    h, w, k = world.height, world.width, world.n_classes
    centers = np.stack(np.meshgrid((np.arange(h) + 0.5) / h,
                                   (np.arange(w) + 0.5) / w,
                                   indexing="ij"), axis=-1)     # (H, W, 2)
    seeds = rng.uniform(0.0, 1.0, (n, k, 2))                    # one site per class
    d2 = np.sum((centers[None, :, :, None, :] - seeds[:, None, None, :, :]) ** 2, axis=-1)
    labels = np.argmin(d2, axis=-1)                             # (N, H, W)
    feats = world.prototypes[labels] + world.feature_noise[labels][..., None] * rng.normal(
        (n, h, w, world.channels))
    return feats, labels


def make_seg_world(seed: int, height: int = 8, width: int = 8, channels: int = 2,
                   n_classes: int = 4, n_train: int = 2000, n_test: int = 400,
                   feature_noise: float = 0.35,
                   class_noise_scales: tuple = (0.6, 1.4)) -> SegWorld:
    """Voronoi grid world: each sample draws one site per class, labels
    cells by the nearest site, and emits prototype-plus-noise features.

    Per-class noise scales are heterogeneous for the same reason as the
    classification world: isotropic target corruption must shift the
    per-pixel optimal rule for adaptation to have headroom.
    """
    rng = Rng(seed)
    angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
    prototypes = 2.5 * np.stack([np.cos(angles), np.sin(angles)], axis=1)[:, :channels]
    if channels > 2:
        prototypes = np.pad(prototypes, ((0, 0), (0, channels - 2)))
    noise = feature_noise * np.array(
        [class_noise_scales[k % len(class_noise_scales)] for k in range(n_classes)])
    world = SegWorld(prototypes, noise, height, width, channels, n_classes,
                     np.zeros((0, height, width, channels)), np.zeros((0, height, width), dtype=np.int64),
                     np.zeros((0, height, width, channels)), np.zeros((0, height, width), dtype=np.int64),
                     seed, None)
    img_tr, lab_tr = _sample_seg_grids(world, n_train, rng.child("train"))
    img_te, lab_te = _sample_seg_grids(world, n_test, rng.child("test"))
    flat_dim = height * width * channels
    ctx = _make_corruption_context(flat_dim, img_tr.reshape(n_train, flat_dim).mean(axis=0),
                                   rng.child("corruption"))
    world.images_train, world.labels_train = img_tr, lab_tr
    world.images_test, world.labels_test = img_te, lab_te
    world.corruption_ctx = ctx
    return world
