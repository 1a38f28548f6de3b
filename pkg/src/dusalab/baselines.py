"""Reference adaptation methods.

``source_only`` never updates; ``entropy`` minimizes the mean softmax
entropy of the task model; ``diffusion_tta`` builds a soft condition
from the full class-probability vector and averages the denoising loss
over several sampled (timestep, noise) pairs per sample.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .diffusion import Denoiser, NoiseSchedule, noisy_sample
from .dusa import AdaptStepReport
from .models import Classifier, predict
from .optim import Adam
from .rng import Rng

__all__ = ["source_only_step", "entropy_loss", "entropy_step", "diffusion_tta_step"]


def source_only_step(x0, clf: Classifier) -> AdaptStepReport:
    """Predictions from the frozen model; no updates, no denoiser work."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    predictions = predict(clf.logits(x0))
    return AdaptStepReport(predictions, 0.0, 0, 0, len(x0))


def entropy_loss(logits):
    """Mean softmax entropy, computed as lse(z) - sum_i p_i z_i per row."""
    lse = ad.logsumexp(logits, axis=-1)
    p = ad.softmax(logits, axis=-1)
    return (lse - (p * logits).sum(axis=-1)).mean()


def entropy_step(x0, clf: Classifier, opt: Adam) -> AdaptStepReport:
    """Entropy minimization over all task-model parameters."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    predictions = predict(clf.logits(x0))

    def loss_fn(p):
        return entropy_loss(clf.forward(p, x0))

    loss, grads = ad.value_and_grad(loss_fn, clf.params)
    clf.params = opt.step(clf.params, grads)
    return AdaptStepReport(predictions, loss, 0, 0, len(x0))


def diffusion_tta_step(x0, clf: Classifier, dn: Denoiser, schedule: NoiseSchedule,
                       n_timesteps: int, opt: Adam, rng: Rng) -> AdaptStepReport:
    """Soft-condition diffusion feedback averaged over sampled timesteps.

    The condition is the probability-weighted mixture of all class
    embedding rows (no pruning); the loss averages the denoising error
    over ``n_timesteps`` fresh (t, eps) pairs per sample and updates both
    models.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if n_timesteps < 1:
        raise ValueError("n_timesteps must be >= 1")
    if clf.n_classes != dn.n_classes or clf.dim != dn.dim:
        raise ValueError("task model and denoiser are incompatible")
    n, d = x0.shape
    k = clf.n_classes
    predictions = predict(clf.logits(x0))

    t = rng.child("t").integers(1, schedule.T + 1, (n, n_timesteps))
    eps = rng.child("noise").normal((n, n_timesteps, d))
    x0_rep = np.repeat(x0, n_timesteps, axis=0)
    t_flat = t.reshape(-1)
    eps_flat = eps.reshape(-1, d)
    x_t = noisy_sample(x0_rep, t_flat, eps_flat, schedule)
    rep_rows = np.repeat(np.arange(n), n_timesteps)

    params = {f"task.{k_}": v for k_, v in clf.params.items()}
    params.update({f"diff.{k_}": v for k_, v in dn.params.items()})

    def loss_fn(p):
        task_p = {key[5:]: v for key, v in p.items() if key.startswith("task.")}
        diff_p = {key[5:]: v for key, v in p.items() if key.startswith("diff.")}
        z = clf.forward(task_p, x0)
        probs = ad.softmax(z, axis=-1)                        # (n, K), all classes
        class_rows = diff_p["class_embed"][:k] if not isinstance(
            diff_p["class_embed"], ad.Tensor) else ad.gather_rows(
            diff_p["class_embed"], np.arange(k))
        soft = probs @ class_rows                             # (n, embed)
        soft_rep = ad.gather_rows(soft, rep_rows)             # (n * nT, embed)
        pred = dn.forward_embedded(diff_p, x_t, t_flat.astype(np.float64), soft_rep)
        r = pred - ad.constant(eps_flat)
        return (r * r).sum(axis=-1).mean()

    loss, grads = ad.value_and_grad(loss_fn, params)
    new_params = opt.step(params, grads)
    clf.params = {key[5:]: v for key, v in new_params.items() if key.startswith("task.")}
    dn.params = {key[5:]: v for key, v in new_params.items() if key.startswith("diff.")}
    return AdaptStepReport(predictions, loss, n * n_timesteps, n * n_timesteps, n)
