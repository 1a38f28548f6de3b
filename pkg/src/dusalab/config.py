"""Nested run configuration with dotted-path overrides.

The configuration is a single JSON-compatible nested document; every
leaf is addressable by a dotted key (``dusa.t``, ``csm.k``) that the
command line exposes one-to-one.
"""

from __future__ import annotations

import copy
import hashlib
import json

__all__ = [
    "DEFAULT_CONFIG",
    "default_config",
    "load_config",
    "merge_config",
    "get_key",
    "set_key",
    "apply_overrides",
    "config_hash",
]

DEFAULT_CONFIG = {
    "seed": 0,
    "out": "runs",
    "method": "dusa",
    "protocol": "fully",
    "world": {
        "kind": "classification",
        "n_classes": 8,
        "dim": 8,
        "seed": 0,
        "n_train": 8000,
        "n_test": 2000,
        "class_scales": [0.45, 1.25],
    },
    "seg_world": {
        "height": 8,
        "width": 8,
        "channels": 2,
        "n_classes": 4,
        "n_train": 2000,
        "n_test": 400,
        "feature_noise": 0.35,
    },
    "pretrain": {
        "classifier": {"epochs": 150, "batch": 128, "lr": 1e-3,
                       "hidden": [64, 64], "label_smoothing": 0.1},
        "denoiser": {"epochs": 120, "batch": 128, "lr": 1e-3,
                     "hidden": [128, 128], "p_null": 0.1, "noise_aug": 1.5,
                     "T": 1000, "beta_start": 1e-4, "beta_end": 0.1,
                     "time_dim": 32, "class_dim": 16, "kind": "epsilon"},
        "dense_labeler": {"epochs": 30, "batch": 32, "lr": 1e-3,
                          "hidden": [64, 64], "label_smoothing": 0.1},
        "grid_denoiser": {"epochs": 80, "batch": 64, "lr": 1e-3,
                          "hidden": [192, 192], "p_null": 0.1, "noise_aug": 1.5,
                          "T": 1000, "beta_start": 1e-4, "beta_end": 0.1,
                          "time_dim": 32, "class_dim": 16, "kind": "epsilon"},
    },
    "adapt": {"lr": 3e-3, "grad_accum": 1},
    "dusa": {"t": 100, "mode": "dusa", "kind": "epsilon"},
    "csm": {"k": 4, "m": 2, "temperature": 1.0},
    "seg": {"budget": 20},
    "diffusion_tta": {"n_timesteps": 6},
    "stream": {"batch": 64, "samples_per_corruption": 4096,
               "corruptions": [["add_noise", 3]]},
    "timing": {"csv_ms": False},
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULT_CONFIG)


def merge_config(base: dict, override: dict) -> dict:
    """Deep merge: override leaves win, nested dicts merge recursively."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge_config(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None) -> dict:
    """Defaults, deep-merged with the JSON document at ``path`` if given."""
    cfg = default_config()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            cfg = merge_config(cfg, json.load(fh))
    return cfg


def get_key(cfg: dict, dotted: str):
    node = cfg
    for part in dotted.split("."):
        node = node[part]
    return node


def _coerce(text: str, reference):
    if isinstance(reference, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(reference, int) and not isinstance(reference, bool):
        return int(text)
    if isinstance(reference, float):
        return float(text)
    if isinstance(reference, list):
        return json.loads(text)
    return text


def set_key(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = cfg
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise KeyError(f"unknown config section '{part}' in '{dotted}'")
        node = node[part]
    leaf = parts[-1]
    if leaf not in node:
        raise KeyError(f"unknown config key '{dotted}'")
    node[leaf] = _coerce(value, node[leaf]) if isinstance(value, str) else value


def apply_overrides(cfg: dict, pairs) -> dict:
    """Apply (dotted_key, value) pairs in place; returns cfg."""
    for dotted, value in pairs:
        set_key(cfg, dotted, value)
    return cfg


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]
