"""Score-prior adaptation objectives and the online adaptation step.

The central objective aligns a sampled forward-process noise with the
probability-weighted aggregate of per-class conditional denoiser
predictions, so gradients flow to the task model through the candidate
probabilities and to the denoiser through its predictions.  The ``u``
variant detaches the conditional predictions (task-model-only learning
from them) and trains the denoiser through the null-condition branch
alone.  A segmentation form applies the same aggregation per pixel with
image-level conditional forwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .csm import BudgetConfig, CandidateSet, logit_norm, select
from .diffusion import Denoiser, NoiseSchedule, convert_prediction, noisy_sample
from .models import Classifier, DenseLabeler, predict
from .optim import Adam
from .rng import Rng

__all__ = [
    "AdaptStepReport",
    "aggregate",
    "loss_dusa",
    "loss_dusa_u",
    "loss_dusa_seg",
    "loss_variant",
    "adapt_step",
    "adapt_step_seg",
]

ADAPT_MODES = ("dusa", "dusa_u")


@dataclass
class AdaptStepReport:
    """Bookkeeping for one evaluate-then-adapt step.

    Predictions are always computed from the pre-update parameters;
    forward/backward counts tally denoiser trunk evaluations and the
    conditional branches that carry gradients into the denoiser.
    """

    predictions: np.ndarray
    loss_value: float
    denoiser_forwards: int
    denoiser_backwards: int
    batch_size: int
    candidates: list[CandidateSet] = field(default_factory=list)


def _as_probs(probs):
    return probs.probs if isinstance(probs, CandidateSet) else probs


def aggregate(probs, preds):
    """Convex combination of predictions: sum_i probs_i * preds_i.

    Shapes: (b,) with (b, d) or batched (..., b) with (..., b, d).
    Accepts Tensors on either argument.
    """
    probs = _as_probs(probs)
    pshape = probs.shape
    if preds.shape[:-1] != pshape:
        raise ValueError(f"probs {pshape} do not align with preds {preds.shape}")
    expanded = probs.reshape(pshape + (1,))
    return (expanded * preds).sum(axis=-2)


def _squared_error(target, estimate):
    r = estimate - target
    return (r * r).sum(axis=-1).mean()


def loss_dusa(eps, probs, cond_preds):
    """Squared error between the noise and its aggregated estimate.

    Per sample this is ||eps - sum_y p_y pred_y||^2; batched inputs are
    averaged over samples.  ``probs`` carries the task-model gradient,
    ``cond_preds`` the denoiser gradient.
    """
    return _squared_error(eps, aggregate(probs, cond_preds))


def loss_dusa_u(eps, probs, cond_preds, uncond_pred):
    """Split objective: aggregation term for the task model only, plus an
    unconditional denoising term for the denoiser only.

    The conditional predictions are gradient-stopped, so the first term
    cannot move the denoiser; the unconditional term involves no task
    probabilities, so it cannot move the task model.
    """
    cond_term = _squared_error(eps, aggregate(probs, ad.stop_gradient(cond_preds)))
    uncond_term = _squared_error(eps, uncond_pred)
    return cond_term + uncond_term


def loss_dusa_seg(eps, prob_map, cond_pred_maps):
    """Per-pixel aggregation loss for dense labeling.

    ``eps``: (..., H, W, c) noise map; ``prob_map``: (..., H, W, Kc)
    per-pixel simplex over the candidate classes; ``cond_pred_maps``:
    (..., Kc, H, W, c), one image-level conditional prediction per
    candidate.  Returns the mean over pixels (and batch) of the squared
    per-pixel residual.
    """
    p_val = prob_map.value if isinstance(prob_map, ad.Tensor) else np.asarray(prob_map)
    if not np.allclose(p_val.sum(axis=-1), 1.0, atol=1e-6):
        raise ValueError("per-pixel probabilities must sum to one")
    batched = p_val.ndim == 4
    if not batched:
        eps = eps.reshape((1,) + eps.shape)
        prob_map = prob_map.reshape((1,) + p_val.shape)
        cond_pred_maps = cond_pred_maps.reshape((1,) + cond_pred_maps.shape)
    if cond_pred_maps.shape[1] != prob_map.shape[-1]:
        raise ValueError("candidate count mismatch between probs and predictions")
    pm = ad.transpose(prob_map, (0, 3, 1, 2)) if isinstance(prob_map, ad.Tensor) \
        else np.transpose(prob_map, (0, 3, 1, 2))
    pm = pm.reshape(pm.shape + (1,))
    agg = (pm * cond_pred_maps).sum(axis=1)          # (B, H, W, c)
    r = agg - eps
    return (r * r).sum(axis=-1).mean()


def _target_of_kind(kind: str, eps, x_t, abar: float):
    if kind == "epsilon":
        return eps
    return convert_prediction(eps, "epsilon", kind, x_t, abar)


def loss_variant(kind: str, eps, x_t, abar: float, probs, preds,
                 pred_kind: str = "epsilon"):
    """Aggregation loss in an alternative output parameterization.

    The target is derived from (eps, x_t) by the exact conversion
    identities, predictions are converted from ``pred_kind`` to ``kind``,
    and the same probability-weighted aggregation is applied.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    x_t_b = x_t[..., None, :] if preds.shape != x_t.shape else x_t
    target = _target_of_kind(kind, eps, x_t, abar)
    converted = preds if pred_kind == kind else \
        convert_prediction(preds, pred_kind, kind, x_t_b, abar)
    return _squared_error(target, aggregate(probs, converted))


def _combined(task_params: dict, diff_params: dict) -> dict:
    out = {f"task.{k}": v for k, v in task_params.items()}
    out.update({f"diff.{k}": v for k, v in diff_params.items()})
    return out


def _split(combined: dict) -> tuple[dict, dict]:
    task = {k[5:]: v for k, v in combined.items() if k.startswith("task.")}
    diff = {k[5:]: v for k, v in combined.items() if k.startswith("diff.")}
    return task, diff


def _chunks(n: int, parts: int) -> list[np.ndarray]:
    parts = max(1, min(parts, n))
    return [c for c in np.array_split(np.arange(n), parts) if c.size]


def adapt_step(x0, clf: Classifier, dn: Denoiser, schedule: NoiseSchedule,
               t: int, cfg: BudgetConfig, mode: str, opt: Adam, rng: Rng,
               kind: str = "epsilon", grad_accum: int = 1,
               temperature: float = 1.0) -> AdaptStepReport:
    """One evaluate-then-adapt step on a batch of raw target samples.

    Per sample: record the prediction from the current parameters, prune
    classes under the budget, share one noise draw across the pruned
    branches, run the conditional denoiser forwards at the fixed
    timestep (plus one null forward for mode ``dusa_u``), and take a
    single joint optimizer update of both models.  Gradients may be
    accumulated over ``grad_accum`` micro-chunks of the batch.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if mode not in ADAPT_MODES:
        raise ValueError(f"mode must be one of {ADAPT_MODES}")
    if not 1 <= t <= schedule.T:
        raise ValueError(f"adaptation timestep must be in [1, {schedule.T}]")
    if clf.dim != dn.dim or x0.shape[1] != clf.dim:
        raise ValueError("sample, task-model and denoiser dimensions disagree")
    if clf.n_classes != dn.n_classes:
        raise ValueError("task model and denoiser disagree on class count")

    n, d = x0.shape
    logits_np = clf.logits(x0)
    predictions = predict(logits_np)

    sel_rng = rng.child("select")
    idx = np.stack([select(logits_np[i], cfg, sel_rng, temperature) for i in range(n)])
    b = idx.shape[1]
    eps = rng.child("noise").normal((n, d))
    x_t = noisy_sample(x0, t, eps, schedule)
    abar = schedule.alpha_bar_at(t)

    params = _combined(clf.params, dn.params)
    grads_total = {k: np.zeros_like(v) for k, v in params.items()}
    loss_total = 0.0
    fwd = bwd = 0
    cands: list[CandidateSet] = []

    for chunk in _chunks(n, grad_accum):
        xc, xtc, epsc, idxc = x0[chunk], x_t[chunk], eps[chunk], idx[chunk]
        nc = len(chunk)
        record = {}

        def loss_fn(p):
            task_p, diff_p = _split(p)
            z = clf.forward(task_p, xc)
            zn = logit_norm(z)
            probs = ad.softmax(ad.take_per_row(zn, idxc), axis=-1)
            record["probs"] = probs.value
            xt_rep = np.repeat(xtc, b, axis=0)
            preds = dn.forward(diff_p, xt_rep, float(t), idxc.reshape(-1))
            preds = preds.reshape((nc, b, d))
            if mode == "dusa":
                return loss_variant(kind, epsc, xtc, abar, probs, preds, dn.kind)
            uncond = dn.forward(diff_p, xtc, float(t), dn.null_index)
            target = _target_of_kind(kind, epsc, xtc, abar)
            preds_k = preds if dn.kind == kind else convert_prediction(
                preds, dn.kind, kind, xtc[:, None, :], abar)
            uncond_k = uncond if dn.kind == kind else convert_prediction(
                uncond, dn.kind, kind, xtc, abar)
            return loss_dusa_u(target, probs, preds_k, uncond_k)

        weight = nc / n
        loss, grads = ad.value_and_grad(loss_fn, params)
        loss_total += weight * loss
        for k in grads_total:
            grads_total[k] += weight * grads[k]
        fwd += nc * (b + (1 if mode == "dusa_u" else 0))
        bwd += nc * (b if mode == "dusa" else 1)
        for i in range(nc):
            cands.append(CandidateSet(idxc[i], record["probs"][i]))

    new_params = opt.step(params, grads_total)
    clf.params, dn.params = _split(new_params)
    return AdaptStepReport(predictions, loss_total, fwd, bwd, n, cands)


def _image_candidates(pred_map: np.ndarray, n_classes: int, budget: int,
                      rng: Rng) -> np.ndarray:
    """Image-level candidate classes: the unique per-pixel top-1 set,
    randomly suppressed above the budget or topped up below it."""
    want = min(budget, n_classes)
    present = np.unique(pred_map)
    if present.size > want:
        keep = rng.gen.choice(present, size=want, replace=False)
        return np.sort(keep)
    if present.size < want:
        missing = np.setdiff1d(np.arange(n_classes), present)
        extra = rng.gen.choice(missing, size=want - present.size, replace=False)
        return np.sort(np.concatenate([present, extra]))
    return np.sort(present)


def adapt_step_seg(images, dl: DenseLabeler, dn: Denoiser, schedule: NoiseSchedule,
                   t: int, budget: int, opt: Adam, rng: Rng,
                   grad_accum: int = 1) -> AdaptStepReport:
    """Evaluate-then-adapt on a batch of grids with image-level pruning.

    Candidates per image are the unique per-pixel predicted classes
    (randomly adjusted to the budget); per-pixel probabilities are the
    channel-normalized logits restricted to the candidates; each
    candidate costs one image-level denoiser forward on the flattened
    grid.  Both models are updated.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if not 1 <= t <= schedule.T:
        raise ValueError(f"adaptation timestep must be in [1, {schedule.T}]")
    if budget < 1:
        raise ValueError("budget must be >= 1")
    n, h, w, c = images.shape
    flat_dim = h * w * c
    if dn.dim != flat_dim:
        raise ValueError("denoiser dimension does not match the flattened grid")

    logits_np = dl.logits(images)
    pred_maps = np.argmax(logits_np, axis=-1)
    k_classes = dl.n_classes

    cand_rng = rng.child("candidates")
    idx = np.stack([_image_candidates(pred_maps[i], k_classes, budget, cand_rng)
                    for i in range(n)])
    b = idx.shape[1]
    eps = rng.child("noise").normal((n, h, w, c))
    x_t = noisy_sample(images.reshape(n, flat_dim), t,
                       eps.reshape(n, flat_dim), schedule)

    params = _combined(dl.params, dn.params)
    grads_total = {k: np.zeros_like(v) for k, v in params.items()}
    loss_total = 0.0

    for chunk in _chunks(n, grad_accum):
        imc, xtc, epsc, idxc = images[chunk], x_t[chunk], eps[chunk], idx[chunk]
        nc = len(chunk)

        def loss_fn(p):
            task_p, diff_p = _split(p)
            z = dl.forward(task_p, imc)                      # (nc, H, W, K)
            zn = logit_norm(z)                               # channel-wise
            rows = zn.reshape((nc * h * w, k_classes))
            row_idx = np.repeat(idxc, h * w, axis=0)
            prob_map = ad.softmax(ad.take_per_row(rows, row_idx), axis=-1)
            prob_map = prob_map.reshape((nc, h, w, b))
            xt_rep = np.repeat(xtc, b, axis=0)
            preds = dn.forward(diff_p, xt_rep, float(t), idxc.reshape(-1))
            preds = preds.reshape((nc, b, h, w, c))
            return loss_dusa_seg(epsc, prob_map, preds)

        weight = nc / n
        loss, grads = ad.value_and_grad(loss_fn, params)
        loss_total += weight * loss
        for k in grads_total:
            grads_total[k] += weight * grads[k]

    new_params = opt.step(params, grads_total)
    dl.params, dn.params = _split(new_params)
    return AdaptStepReport(pred_maps, loss_total, n * b, n * b, n)
