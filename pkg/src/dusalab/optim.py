"""Adam optimizer over named parameter sets.

Parameter sets are plain dicts mapping names to float64 arrays; updates
iterate names in lexicographic order so two runs with identical seeds
produce bit-identical trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["OptState", "init_state", "adam_step", "Adam", "cosine_lr"]


def cosine_lr(step: int, total: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Cosine annealing from lr_max to lr_min over ``total`` steps."""
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + np.cos(np.pi * step / max(total, 1)))


@dataclass
class OptState:
    """First/second moment estimates plus the shared step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def init_state(params: dict) -> OptState:
    return OptState(
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
        t=0,
    )


def adam_step(params: dict, grads: dict, state: OptState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[dict, OptState]:
    """One bias-corrected Adam update; returns new params and state."""
    if set(params) != set(grads):
        raise ValueError("gradient names do not match parameter names")
    t = state.t + 1
    new_params, new_m, new_v = {}, {}, {}
    for name in sorted(params):
        p, g = params[name], grads[name]
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch for '{name}': {p.shape} vs {g.shape}")
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, OptState(new_m, new_v, t)


class Adam:
    """Stateful convenience wrapper around :func:`adam_step`."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: OptState | None = None

    def step(self, params: dict, grads: dict) -> dict:
        if self.state is None:
            self.state = init_state(params)
        params, self.state = adam_step(params, grads, self.state,
                                       self.lr, self.beta1, self.beta2, self.eps)
        return params

    def reset(self) -> None:
        self.state = None
