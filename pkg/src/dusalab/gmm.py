"""Exact Gaussian-mixture ground truth.

A labeled mixture gives closed forms for everything the learned models
only approximate: densities, score functions, class posteriors, the
forward-noised marginal at any signal level, and the minimum-MSE noise
predictor.  The ``verify_*`` functions certify numerically that the
score decomposition, the posterior-mean identity, and the optimality of
posterior-weighted noise aggregation hold for these closed forms.

Notation: ``abar`` is the signal fraction of the forward process, i.e.
noisy data is sqrt(abar) * x0 + sqrt(1 - abar) * eps with unit Gaussian
eps, so the class-y marginal of noisy data is
N(sqrt(abar) * mu_y, abar * Sigma_y + (1 - abar) * I).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from .rng import Rng

__all__ = [
    "Gaussian",
    "Mixture",
    "log_density",
    "score",
    "conditional_score",
    "posterior",
    "diffuse",
    "expected_noise",
    "verify_prop1",
    "verify_tweedie",
    "verify_mmse_optimality",
    "sample",
    "random_mixture",
    "mixture_to_dict",
    "mixture_from_dict",
    "save_mixture",
    "load_mixture",
]

_MIN_EIGENVALUE = 1e-9


@dataclass(frozen=True)
class Gaussian:
    """A single d-dimensional Gaussian with SPD covariance."""

    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise ValueError("mean must be (d,) and covariance (d, d)")
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        cov = 0.5 * (cov + cov.T)
        if np.linalg.eigvalsh(cov)[0] < _MIN_EIGENVALUE:
            raise ValueError(f"covariance must have eigenvalues >= {_MIN_EIGENVALUE}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "chol", cholesky(cov, lower=True))

    @property
    def dim(self) -> int:
        return self.mean.size

    def log_det(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Covariance solve through the Cholesky factor."""
        return cho_solve((self.chol, True), b)


@dataclass(frozen=True)
class Mixture:
    """Labeled Gaussian mixture: one component per class."""

    labels: tuple
    components: tuple
    weights: np.ndarray

    def __post_init__(self):
        labels = tuple(int(v) for v in self.labels)
        comps = tuple(self.components)
        w = np.asarray(self.weights, dtype=np.float64)
        if len(labels) != len(comps) or len(labels) != w.size:
            raise ValueError("labels, components and weights must align")
        if len(set(labels)) != len(labels):
            raise ValueError("class labels must be distinct")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be a probability vector")
        dims = {c.dim for c in comps}
        if len(dims) != 1:
            raise ValueError("all components must share one dimension")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "weights", w / w.sum())

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @property
    def n_classes(self) -> int:
        return len(self.labels)

    def component_of(self, label: int) -> Gaussian:
        try:
            return self.components[self.labels.index(int(label))]
        except ValueError:
            raise ValueError(f"unknown class label {label}") from None


def _check_point(m: Mixture, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != m.dim:
        raise ValueError(f"point dimension {x.shape[-1]} != mixture dimension {m.dim}")
    return x


def _component_log_densities(m: Mixture, x: np.ndarray) -> np.ndarray:
    """log N(x; mu_y, Sigma_y) for every component; x is (..., d)."""
    out = []
    for g in m.components:
        dev = x - g.mean
        half = solve_triangular(g.chol, dev.reshape(-1, g.dim).T, lower=True)
        quad = np.sum(half * half, axis=0).reshape(dev.shape[:-1])
        out.append(-0.5 * (g.dim * np.log(2.0 * np.pi) + g.log_det() + quad))
    return np.stack(out, axis=-1)


def log_density(m: Mixture, x) -> float | np.ndarray:
    """log p(x) via log-sum-exp over weighted component densities."""
    x = _check_point(m, x)
    logs = _component_log_densities(m, x) + np.log(m.weights)
    mx = logs.max(axis=-1, keepdims=True)
    out = (mx + np.log(np.exp(logs - mx).sum(axis=-1, keepdims=True))).squeeze(-1)
    return float(out) if out.ndim == 0 else out


def posterior(m: Mixture, x) -> np.ndarray:
    """Bayes posterior over class labels, computed in log space."""
    x = _check_point(m, x)
    logs = _component_log_densities(m, x) + np.log(m.weights)
    logs = logs - logs.max(axis=-1, keepdims=True)
    p = np.exp(logs)
    return p / p.sum(axis=-1, keepdims=True)


def conditional_score(m: Mixture, label: int, x) -> np.ndarray:
    """Gradient of log p(x | y): -Sigma_y^{-1} (x - mu_y)."""
    x = _check_point(m, x)
    g = m.component_of(label)
    dev = x - g.mean
    return -g.solve(dev.reshape(-1, g.dim).T).T.reshape(x.shape)


def score(m: Mixture, x) -> np.ndarray:
    """Gradient of log p(x), as the direct density-gradient ratio.

    Computed as grad p(x) / p(x) with responsibilities exp(log_y - max):
    the gradient of the log-sum-exp of component log densities.  This is
    a different floating-point arrangement than the posterior-weighted
    sum of conditional scores, which is what :func:`verify_prop1`
    compares it against.
    """
    x = _check_point(m, x)
    logs = _component_log_densities(m, x) + np.log(m.weights)
    resp = np.exp(logs - logs.max(axis=-1, keepdims=True))
    grads = np.stack([conditional_score(m, lbl, x) for lbl in m.labels], axis=-1)
    num = (grads * resp[..., None, :]).sum(axis=-1)
    return num / resp.sum(axis=-1)[..., None]


def diffuse(m: Mixture, abar: float) -> Mixture:
    """Exact marginal of sqrt(abar) x0 + sqrt(1-abar) eps, class by class."""
    if not 0.0 < abar <= 1.0:
        raise ValueError("abar must be in (0, 1]")
    eye = np.eye(m.dim)
    comps = tuple(
        Gaussian(np.sqrt(abar) * g.mean, abar * g.cov + (1.0 - abar) * eye)
        for g in m.components
    )
    return Mixture(m.labels, comps, m.weights.copy())


def expected_noise(m: Mixture, abar: float, x_t, label: int | None = None) -> np.ndarray:
    """Minimum-MSE predictor of the injected noise given noisy data.

    Equal to -sqrt(1-abar) times the score of the diffused mixture at
    ``x_t`` (marginal if ``label`` is None, else the single component's
    score).
    """
    if not 0.0 < abar < 1.0:
        raise ValueError("abar must be in (0, 1); abar = 1 is degenerate")
    md = diffuse(m, abar)
    s = score(md, x_t) if label is None else conditional_score(md, label, x_t)
    return -np.sqrt(1.0 - abar) * s


def _relative_residual(lhs: np.ndarray, rhs: np.ndarray) -> float:
    return float(np.linalg.norm(lhs - rhs) / (1.0 + np.linalg.norm(rhs)))


def verify_prop1(m: Mixture, x) -> float:
    """Residual of the score decomposition at ``x``.

    Compares the marginal score (density-gradient route) against the
    posterior-weighted sum of conditional scores (Bayes route).  Returns
    ||lhs - rhs|| / (1 + ||lhs||), so zero-score points do not divide by
    zero.
    """
    x = _check_point(m, x)
    lhs = score(m, x)
    post = posterior(m, x)
    rhs = np.zeros_like(x)
    for i, lbl in enumerate(m.labels):
        rhs += post[i] * conditional_score(m, lbl, x)
    return float(np.linalg.norm(lhs - rhs) / (1.0 + np.linalg.norm(lhs)))


def _conditional_x0_mean(m: Mixture, abar: float, x_t: np.ndarray) -> list:
    """E[x0 | x_t, y] for each class, by conjugate Gaussian conditioning."""
    out = []
    for g in m.components:
        cross = abar * g.cov + (1.0 - abar) * np.eye(m.dim)
        gain = np.sqrt(abar) * g.cov @ np.linalg.solve(cross, np.eye(m.dim))
        out.append(g.mean + gain @ (x_t - np.sqrt(abar) * g.mean))
    return out


def verify_tweedie(m: Mixture, abar: float, x_t) -> float:
    """Residual of the posterior-mean identity at ``x_t``.

    The left side E[sqrt(abar) x0 | x_t] is assembled independently from
    per-class conjugate-Gaussian posterior means weighted by the diffused
    posterior; the right side is x_t + (1 - abar) * score of the diffused
    marginal.
    """
    if not 0.0 < abar < 1.0:
        raise ValueError("abar must be in (0, 1)")
    x_t = _check_point(m, x_t)
    md = diffuse(m, abar)
    post = posterior(md, x_t)
    means = _conditional_x0_mean(m, abar, x_t)
    lhs = np.sqrt(abar) * sum(p * mu for p, mu in zip(post, means))
    rhs = x_t + (1.0 - abar) * score(md, x_t)
    return _relative_residual(lhs, rhs)


def _sample_x0_given_xt(m: Mixture, abar: float, x_t: np.ndarray,
                        n: int, rng: Rng) -> np.ndarray:
    """Draw x0 ~ p(x0 | x_t): class from the diffused posterior, then the
    conjugate Gaussian conditional within the class."""
    md = diffuse(m, abar)
    post = posterior(md, x_t)
    counts = rng.gen.multinomial(n, post)
    means = _conditional_x0_mean(m, abar, x_t)
    eye = np.eye(m.dim)
    draws = []
    for g, mu_cond, cnt in zip(m.components, means, counts):
        if cnt == 0:
            continue
        cross = abar * g.cov + (1.0 - abar) * eye
        cov_cond = g.cov - abar * g.cov @ np.linalg.solve(cross, g.cov)
        cov_cond = 0.5 * (cov_cond + cov_cond.T) + 1e-12 * eye
        chol = cholesky(cov_cond, lower=True)
        z = rng.normal((cnt, m.dim))
        draws.append(mu_cond + z @ chol.T)
    x0 = np.concatenate(draws, axis=0)
    return rng.gen.permutation(x0, axis=0)


def verify_mmse_optimality(m: Mixture, abar: float, x_t, trials: int,
                           samples: int, rng: Rng) -> bool:
    """Check that posterior weights minimize the aggregation MSE.

    Monte-Carlo estimate of E ||eps - sum_y w_y eps*_y(x_t)||^2 over the
    conditional law of eps given x_t, comparing the diffused-posterior
    weights against ``trials`` random simplex perturbations with common
    random numbers.  True iff no perturbation beats the posterior by more
    than three (paired) standard errors.
    """
    if trials < 1 or samples < 10_000:
        raise ValueError("need trials >= 1 and samples >= 1e4")
    x_t = _check_point(m, x_t)
    md = diffuse(m, abar)
    post = posterior(md, x_t)
    preds = np.stack(
        [expected_noise(m, abar, x_t, label=lbl) for lbl in m.labels], axis=0
    )  # (K, d)

    x0 = _sample_x0_given_xt(m, abar, x_t, samples, rng)
    eps = (x_t - np.sqrt(abar) * x0) / np.sqrt(1.0 - abar)  # (N, d)

    def mse_terms(w):
        q = w @ preds
        return np.sum((eps - q) ** 2, axis=1)

    base = mse_terms(post)
    k = m.n_classes
    for _ in range(trials):
        u = rng.gen.dirichlet(np.ones(k))
        lam = rng.uniform(0.05, 1.0)
        w = (1.0 - lam) * post + lam * u
        diff = mse_terms(w) - base
        mean = diff.mean()
        se = diff.std(ddof=1) / np.sqrt(samples)
        if mean < -3.0 * se:
            return False
    return True


def sample(m: Mixture, n: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` labeled points; returns ``(X, y)`` with y the class labels."""
    counts = rng.gen.multinomial(n, m.weights)
    xs, ys = [], []
    for lbl, g, cnt in zip(m.labels, m.components, counts):
        if cnt == 0:
            continue
        z = rng.normal((cnt, m.dim))
        xs.append(g.mean + z @ g.chol.T)
        ys.append(np.full(cnt, lbl, dtype=np.int64))
    x = np.concatenate(xs, axis=0)
    y = np.concatenate(ys, axis=0)
    perm = rng.gen.permutation(n)
    return x[perm], y[perm]


def random_mixture(dim: int, n_classes: int, rng: Rng) -> Mixture:
    """Reproducible random mixture for verification suites.

    Means uniform on the sphere of radius 4, covariances A A^T + 0.5 I
    with standard-normal A, weights Dirichlet(1).
    """
    comps = []
    for _ in range(n_classes):
        direction = rng.normal(dim)
        direction /= np.linalg.norm(direction)
        a = rng.normal((dim, dim))
        comps.append(Gaussian(4.0 * direction, a @ a.T + 0.5 * np.eye(dim)))
    weights = rng.gen.dirichlet(np.ones(n_classes))
    return Mixture(tuple(range(n_classes)), tuple(comps), weights)


# -- plain-text serialization ---------------------------------------------

def mixture_to_dict(m: Mixture) -> dict:
    return {
        "weights": m.weights.tolist(),
        "components": [
            {"label": lbl, "mean": g.mean.tolist(), "cov": [row.tolist() for row in g.cov]}
            for lbl, g in zip(m.labels, m.components)
        ],
    }


def mixture_from_dict(doc: dict) -> Mixture:
    comps = tuple(Gaussian(np.array(c["mean"]), np.array(c["cov"]))
                  for c in doc["components"])
    labels = tuple(c["label"] for c in doc["components"])
    return Mixture(labels, comps, np.array(doc["weights"]))


def save_mixture(m: Mixture, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(mixture_to_dict(m), fh, indent=2)


def load_mixture(path) -> Mixture:
    with open(path, encoding="utf-8") as fh:
        return mixture_from_dict(json.load(fh))
