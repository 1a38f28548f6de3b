"""Candidate selection: logit normalization and budgeted class pruning.

The selection budget b = k + m splits into a deterministic top-k (ties
toward the lower class index) and m multinomial draws without
replacement from the remaining classes, with sampling probabilities
softmax of the raw (unnormalized) logits.  Probabilities over the
selected classes come from a softmax of the l2-normalized logits
restricted to the selection; pruned classes carry implicit probability
exactly zero.  Gradients flow through the normalization and the
restricted softmax only, never through the discrete index choice.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .rng import Rng

__all__ = ["BudgetConfig", "CandidateSet", "logit_norm", "select", "probs_over", "csm"]

_NORM_GUARD = 1e-12


@dataclass(frozen=True)
class BudgetConfig:
    """Selection budget b = k + m (k deterministic, m sampled)."""

    k: int
    m: int

    def __post_init__(self):
        if self.k < 0 or self.m < 0 or self.k + self.m < 1:
            raise ValueError("need k >= 0, m >= 0 and k + m >= 1")

    @property
    def b(self) -> int:
        return self.k + self.m

    def clipped(self, n_classes: int) -> "BudgetConfig":
        """Clip the budget to the class count (b > K selects everything)."""
        if self.b > n_classes:
            warnings.warn(
                f"budget b={self.b} exceeds K={n_classes}; clipping to K",
                stacklevel=2)
        k = min(self.k, n_classes)
        m = min(self.m, n_classes - k)
        if k + m < 1:
            k = 1
        return BudgetConfig(k, m)


@dataclass(frozen=True)
class CandidateSet:
    """Selected class indices (top-k first) with renormalized probabilities."""

    indices: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.intp)
        p = np.asarray(self.probs, dtype=np.float64)
        if idx.ndim != 1 or p.shape != idx.shape:
            raise ValueError("indices and probs must be aligned vectors")
        if len(set(idx.tolist())) != idx.size:
            raise ValueError("candidate indices must be distinct")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("probs must be a probability vector")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "probs", p)


def logit_norm(z):
    """l2-normalize logits: z / max(||z||, guard); rows for 2-D input.

    Differentiable when given a Tensor; the guard covers the zero vector.
    """
    sq = (z * z).sum(axis=-1, keepdims=True) if isinstance(z, ad.Tensor) \
        else np.sum(z * z, axis=-1, keepdims=True)
    norm = ad.clip_min(ad.sqrt(sq), _NORM_GUARD)
    return z / norm


def select(z_raw, cfg: BudgetConfig, rng: Rng | None = None,
           temperature: float = 1.0) -> np.ndarray:
    """Budgeted class selection on one raw logit vector.

    Returns b distinct indices: the deterministic top-k in descending
    logit order, then m classes drawn without replacement from the rest
    with probabilities proportional to softmax(z_raw / temperature),
    reported in descending logit order as well (a canonical order; the
    selection law is order-free).
    """
    z_raw = np.asarray(z_raw, dtype=np.float64)
    if z_raw.ndim != 1:
        raise ValueError("select operates on a single logit vector")
    n_classes = z_raw.size
    cfg = cfg.clipped(n_classes)
    order = np.argsort(-z_raw, kind="stable")  # ties: lower index first
    top = order[:cfg.k]
    if cfg.m == 0:
        return top
    if rng is None:
        raise ValueError("m > 0 requires an rng")
    rest = order[cfg.k:]
    logits = (z_raw[rest] - z_raw[rest].max()) / temperature
    weights = np.exp(logits)
    chosen = []
    for _ in range(cfg.m):
        p = weights / weights.sum()
        pick = int(rng.gen.choice(len(rest), p=p))
        chosen.append(rest[pick])
        weights[pick] = 0.0
    extras = np.array(sorted(chosen, key=lambda i: (-z_raw[i], i)), dtype=np.intp)
    return np.concatenate([top, extras])


def probs_over(z_norm, indices):
    """Softmax restricted to the selected entries of normalized logits.

    Accepts a Tensor (gradients flow to the logits) or a plain array.
    ``z_norm`` is 1-D with 1-D indices, or a batch (B, K) with (B, b).
    """
    idx = np.asarray(indices, dtype=np.intp)
    flat_check = idx.reshape(-1) if idx.ndim == 1 else idx
    if idx.ndim == 1:
        if len(set(idx.tolist())) != idx.size:
            raise ValueError("duplicate candidate index")
        picked = z_norm[idx] if not isinstance(z_norm, ad.Tensor) else None
        if isinstance(z_norm, ad.Tensor):
            picked = ad.take_per_row(z_norm.reshape(1, -1), idx[None, :]).reshape(-1)
        return ad.softmax(picked, axis=-1)
    for row in flat_check:
        if len(set(row.tolist())) != row.size:
            raise ValueError("duplicate candidate index")
    picked = ad.take_per_row(z_norm, idx)
    return ad.softmax(picked, axis=-1)


def csm(z, cfg: BudgetConfig, rng: Rng | None = None,
        temperature: float = 1.0) -> CandidateSet:
    """Full pruning pipeline on one raw logit vector.

    Normalizes the logits, selects indices from the raw logits, and
    returns the renormalized probabilities over the selection.
    """
    z = np.asarray(z, dtype=np.float64)
    indices = select(z, cfg, rng, temperature)
    z_norm = logit_norm(z)
    probs = probs_over(z_norm, indices)
    return CandidateSet(indices, np.asarray(probs, dtype=np.float64))
