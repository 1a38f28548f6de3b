"""Model checkpoints: parameter dumps plus a manifest for compatibility.

A checkpoint is a pair of files sharing a prefix: ``<prefix>.npz`` holds
the named parameter arrays, ``<prefix>.json`` a manifest binding the
architecture, class count, prediction kind, schedule hash and world
hash.  Loading verifies the manifest against the caller's expectations
and refuses mismatches before any model is built.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from . import __version__
from .diffusion import Denoiser, NoiseSchedule
from .models import Classifier, DenseLabeler
from .rng import Rng

__all__ = ["CheckpointMismatch", "save_model", "load_model", "params_hash"]


class CheckpointMismatch(ValueError):
    """Manifest does not match what the caller expects."""


def params_hash(params: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name]).tobytes())
    return h.hexdigest()[:16]


def _model_kind(model) -> str:
    if isinstance(model, Classifier):
        return "classifier"
    if isinstance(model, DenseLabeler):
        return "dense_labeler"
    if isinstance(model, Denoiser):
        return "denoiser"
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def save_model(model, prefix, schedule: NoiseSchedule | None = None,
               world_hash: str | None = None) -> dict:
    """Write ``<prefix>.npz`` and ``<prefix>.json``; returns the manifest."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "kind": _model_kind(model),
        "config": model.config(),
        "param_hash": params_hash(model.params),
        "version": __version__,
    }
    if manifest["kind"] == "denoiser":
        manifest["prediction_kind"] = model.kind
        if schedule is not None:
            manifest["schedule_hash"] = schedule.hash()
    if world_hash is not None:
        manifest["world_hash"] = world_hash
    np.savez(str(prefix) + ".npz", **model.params)
    with open(str(prefix) + ".json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def _instantiate(manifest: dict):
    cfg = manifest["config"]
    kind = manifest["kind"]
    rng = Rng(0)  # parameters are overwritten below
    if kind == "classifier":
        return Classifier(cfg["dim"], cfg["n_classes"], rng, hidden=tuple(cfg["hidden"]))
    if kind == "dense_labeler":
        return DenseLabeler(cfg["height"], cfg["width"], cfg["channels"],
                            cfg["n_classes"], rng, hidden=tuple(cfg["hidden"]),
                            pos_dim=cfg["pos_dim"])
    if kind == "denoiser":
        return Denoiser(cfg["dim"], cfg["n_classes"], rng, kind=cfg["kind"],
                        hidden=tuple(cfg["hidden"]), time_dim=cfg["time_dim"],
                        class_dim=cfg["class_dim"])
    raise CheckpointMismatch(f"unknown checkpoint kind '{kind}'")


def load_model(prefix, expect: dict | None = None,
               schedule: NoiseSchedule | None = None,
               world_hash: str | None = None):
    """Load a checkpoint, refusing on any manifest mismatch.

    ``expect`` entries are compared against the manifest's model config
    (e.g. {"dim": 8, "n_classes": 8}); ``schedule`` and ``world_hash``
    are checked against the recorded hashes when the manifest has them.
    """
    prefix = Path(prefix)
    with open(str(prefix) + ".json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    cfg = manifest["config"]
    for key, want in (expect or {}).items():
        if cfg.get(key) != want:
            raise CheckpointMismatch(
                f"checkpoint {prefix.name}: {key}={cfg.get(key)!r}, expected {want!r}")
    if schedule is not None and "schedule_hash" in manifest:
        if manifest["schedule_hash"] != schedule.hash():
            raise CheckpointMismatch(
                f"checkpoint {prefix.name}: schedule hash mismatch")
    if world_hash is not None and "world_hash" in manifest:
        if manifest["world_hash"] != world_hash:
            raise CheckpointMismatch(
                f"checkpoint {prefix.name}: world hash mismatch")
    model = _instantiate(manifest)
    with np.load(str(prefix) + ".npz") as data:
        model.params = {name: data[name] for name in data.files}
    if params_hash(model.params) != manifest["param_hash"]:
        raise CheckpointMismatch(f"checkpoint {prefix.name}: parameter hash mismatch")
    return model
