"""Small dense networks and fixed sinusoidal encodings.

All models in this package share the same trunk: a tanh MLP whose final
layer is zero-initialized, so fresh models output exactly zero.  Forward
passes take a dict of parameters that may hold either plain arrays or
autodiff Tensors; the same code path serves evaluation and training.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .rng import Rng

__all__ = ["init_mlp", "mlp_forward", "sinusoidal_embedding", "grid_positional_encoding"]


def init_mlp(sizes, rng: Rng, prefix: str = "", zero_last: bool = True) -> dict:
    """Initialize an MLP with layer widths ``sizes``.

    Hidden weights are Gaussian scaled by 1/sqrt(fan_in); the final layer
    is zeroed by default so an untrained model predicts exactly zero.
    """
    params = {}
    n_layers = len(sizes) - 1
    for i in range(n_layers):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        if zero_last and i == n_layers - 1:
            w = np.zeros((fan_in, fan_out))
        else:
            w = rng.normal((fan_in, fan_out)) / np.sqrt(fan_in)
        params[f"{prefix}W{i}"] = w
        params[f"{prefix}b{i}"] = np.zeros(fan_out)
    return params


def mlp_forward(params: dict, x, n_layers: int, prefix: str = ""):
    """Forward pass: tanh between layers, linear output layer."""
    h = x
    for i in range(n_layers):
        h = h @ params[f"{prefix}W{i}"] + params[f"{prefix}b{i}"]
        if i < n_layers - 1:
            h = ad.tanh(h)
    return h


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    """Transformer-style sin/cos embedding of timestep(s) ``t``.

    Returns shape (dim,) for a scalar or (n, dim) for a vector of steps.
    """
    if dim % 2 != 0:
        raise ValueError("embedding dimension must be even")
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    angles = t_arr[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)
    return emb[0] if np.isscalar(t) or np.ndim(t) == 0 else emb


def grid_positional_encoding(height: int, width: int, dim: int = 8) -> np.ndarray:
    """Fixed per-cell positional code of shape (H, W, dim).

    Half of the dimensions encode the row, half the column, each with a
    low and a high frequency sin/cos pair.
    """
    if dim % 4 != 0:
        raise ValueError("positional dimension must be a multiple of 4")
    per_axis = dim // 2
    rows = np.arange(height) / max(height - 1, 1)
    cols = np.arange(width) / max(width - 1, 1)
    row_emb = sinusoidal_embedding(rows * 10.0, per_axis)
    col_emb = sinusoidal_embedding(cols * 10.0, per_axis)
    enc = np.zeros((height, width, dim))
    enc[:, :, :per_axis] = row_emb[:, None, :]
    enc[:, :, per_axis:] = col_emb[None, :, :]
    return enc
