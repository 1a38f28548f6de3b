"""Experiment orchestration: pretraining, online runs, sweeps, reports.

A run streams corrupted target batches through one adaptation method
under a protocol: ``fully`` restores the pretrained checkpoints at every
corruption boundary, ``continual`` never resets.  Every batch is scored
before the update it triggers (online test-time semantics), and each
batch contributes one CSV row with exact forward/backward accounting.
"""

from __future__ import annotations

import copy
import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gmm
from .baselines import diffusion_tta_step, entropy_step, source_only_step
from .checkpoint import load_model, save_model
from .config import config_hash, get_key
from .csm import BudgetConfig
from .diffusion import linear_schedule, train_denoiser
from .dusa import adapt_step, adapt_step_seg
from .models import mean_iou, predict, train_classifier, train_dense_labeler
from .optim import Adam
from .rng import Rng
from .worlds import SegWorld, World, corrupt, make_seg_world, make_world

__all__ = [
    "StreamSpec",
    "BatchRow",
    "RunRecord",
    "METHODS",
    "world_from_config",
    "schedule_from_config",
    "pretrain",
    "run_protocol",
    "write_run",
    "sweep",
    "report",
]

METHODS = ("source_only", "entropy", "diffusion_tta", "dusa", "dusa_u")
CSV_COLUMNS = ["run_id", "method", "protocol", "corruption", "severity",
               "batch", "acc", "loss", "fwd", "bwd", "ms"]


@dataclass(frozen=True)
class StreamSpec:
    """Deterministic target stream: corruption sequence and batch layout."""

    corruptions: tuple           # ((kind, severity), ...)
    batch: int
    samples_per_corruption: int
    seed: int

    def __post_init__(self):
        if self.batch < 1 or self.samples_per_corruption < 1:
            raise ValueError("batch and samples_per_corruption must be positive")
        object.__setattr__(self, "corruptions",
                           tuple((str(k), int(s)) for k, s in self.corruptions))


def stream_spec_from_config(cfg: dict, seed: int | None = None) -> StreamSpec:
    st = cfg["stream"]
    return StreamSpec(tuple((k, s) for k, s in st["corruptions"]),
                      st["batch"], st["samples_per_corruption"],
                      cfg["seed"] if seed is None else seed)


@dataclass
class BatchRow:
    corruption: str
    severity: int
    batch: int
    n: int
    acc: float
    loss: float
    fwd: int
    bwd: int
    wall_ms: float


@dataclass
class RunRecord:
    run_id: str
    method: str
    protocol: str
    rows: list = field(default_factory=list)
    per_corruption: dict = field(default_factory=dict)
    overall: float = 0.0
    config_hash: str = ""
    seed: int = 0

    def aggregate(self) -> None:
        """Sample-weighted means of the per-batch metric."""
        self.per_corruption = {}
        groups: dict[str, list[BatchRow]] = {}
        for row in self.rows:
            groups.setdefault(row.corruption, []).append(row)
        for kind, rows in groups.items():
            n = sum(r.n for r in rows)
            self.per_corruption[kind] = sum(r.acc * r.n for r in rows) / n
        total = sum(r.n for r in self.rows)
        self.overall = sum(r.acc * r.n for r in self.rows) / total


def world_from_config(cfg: dict):
    wc = cfg["world"]
    if wc["kind"] == "segmentation":
        sc = cfg["seg_world"]
        return make_seg_world(wc["seed"], sc["height"], sc["width"], sc["channels"],
                              sc["n_classes"], sc["n_train"], sc["n_test"],
                              sc["feature_noise"])
    return make_world(wc["n_classes"], wc["dim"], wc["seed"],
                      wc["n_train"], wc["n_test"], tuple(wc["class_scales"]))


def world_hash(world) -> str:
    if isinstance(world, World):
        doc = gmm.mixture_to_dict(world.mixture)
        doc["seed"] = world.seed
    else:
        doc = {"prototypes": world.prototypes.tolist(), "seed": world.seed,
               "noise": world.feature_noise.tolist(),
               "grid": [world.height, world.width, world.channels, world.n_classes]}
    import hashlib
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def schedule_from_config(cfg: dict, which: str = "denoiser"):
    dc = cfg["pretrain"][which]
    return linear_schedule(dc["T"], dc["beta_start"], dc["beta_end"])


def _denoiser_arch(dc: dict) -> dict:
    return {"hidden": tuple(dc["hidden"]), "time_dim": dc["time_dim"],
            "class_dim": dc["class_dim"], "kind": dc["kind"]}


def pretrain(cfg: dict, out_dir) -> dict:
    """Train and checkpoint the source models for the configured world.

    Classification worlds get a classifier plus a conditional denoiser;
    segmentation worlds a dense labeler plus a grid denoiser over the
    flattened grid (its training condition is the label of a random cell
    of each grid, an area-weighted image-level class).  Returns the
    checkpoint manifest dict.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    world = world_from_config(cfg)
    whash = world_hash(world)
    rng = Rng(cfg["seed"]).child("pretrain")
    manifests = {"world_hash": whash, "config_hash": config_hash(cfg)}

    if isinstance(world, World):
        cc = cfg["pretrain"]["classifier"]
        clf = train_classifier(world.x_train, world.y_train, world.n_classes,
                               rng.child("classifier"), epochs=cc["epochs"],
                               batch=cc["batch"], lr=cc["lr"],
                               hidden=tuple(cc["hidden"]),
                               label_smoothing=cc["label_smoothing"])
        manifests["classifier"] = save_model(clf, out_dir / "classifier",
                                             world_hash=whash)
        dc = cfg["pretrain"]["denoiser"]
        schedule = schedule_from_config(cfg, "denoiser")
        dn = train_denoiser(world.x_train, world.y_train, world.n_classes,
                            schedule, rng.child("denoiser"), p_null=dc["p_null"],
                            epochs=dc["epochs"], batch=dc["batch"], lr=dc["lr"],
                            noise_aug=dc["noise_aug"], **_denoiser_arch(dc))
        manifests["denoiser"] = save_model(dn, out_dir / "denoiser",
                                           schedule=schedule, world_hash=whash)
    else:
        lc = cfg["pretrain"]["dense_labeler"]
        dl = train_dense_labeler(world.images_train, world.labels_train,
                                 world.n_classes, rng.child("labeler"),
                                 epochs=lc["epochs"], batch=lc["batch"],
                                 lr=lc["lr"], hidden=tuple(lc["hidden"]))
        manifests["dense_labeler"] = save_model(dl, out_dir / "dense_labeler",
                                                world_hash=whash)
        gc = cfg["pretrain"]["grid_denoiser"]
        schedule = schedule_from_config(cfg, "grid_denoiser")
        flat = world.images_train.reshape(len(world.images_train), -1)
        pick = rng.child("grid_labels")
        rows = pick.integers(0, world.height, len(flat))
        cols = pick.integers(0, world.width, len(flat))
        grid_labels = world.labels_train[np.arange(len(flat)), rows, cols]
        dn = train_denoiser(flat, grid_labels, world.n_classes, schedule,
                            rng.child("grid_denoiser"), p_null=gc["p_null"],
                            epochs=gc["epochs"], batch=gc["batch"], lr=gc["lr"],
                            noise_aug=gc["noise_aug"], **_denoiser_arch(gc))
        manifests["grid_denoiser"] = save_model(dn, out_dir / "grid_denoiser",
                                                schedule=schedule, world_hash=whash)
    with open(out_dir / "pretrain_manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifests, fh, indent=2, sort_keys=True)
    return manifests


def _load_checkpoints(cfg: dict, world, checkpoints):
    whash = world_hash(world)
    ckpt = Path(checkpoints)
    if isinstance(world, World):
        schedule = schedule_from_config(cfg, "denoiser")
        clf = load_model(ckpt / "classifier",
                         expect={"dim": world.dim, "n_classes": world.n_classes},
                         world_hash=whash)
        dn = load_model(ckpt / "denoiser",
                        expect={"dim": world.dim, "n_classes": world.n_classes},
                        schedule=schedule, world_hash=whash)
        return {"task": clf, "diffusion": dn, "schedule": schedule}
    schedule = schedule_from_config(cfg, "grid_denoiser")
    dl = load_model(ckpt / "dense_labeler",
                    expect={"height": world.height, "width": world.width,
                            "channels": world.channels, "n_classes": world.n_classes},
                    world_hash=whash)
    dn = load_model(ckpt / "grid_denoiser",
                    expect={"dim": world.flat_dim, "n_classes": world.n_classes},
                    schedule=schedule, world_hash=whash)
    return {"task": dl, "diffusion": dn, "schedule": schedule}


def _target_block(world, kind: str, severity: int, n: int, rng: Rng):
    """Draw raw source samples and corrupt them (one corruption segment)."""
    if isinstance(world, World):
        x, y = gmm.sample(world.mixture, n, rng.child("draw"))
        xc = corrupt(x, kind, severity, world.corruption_ctx, rng.child("corrupt"))
        return xc, y
    images, labels = world.sample(n, rng.child("draw"))
    flat = images.reshape(n, -1)
    flat = corrupt(flat, kind, severity, world.corruption_ctx, rng.child("corrupt"))
    return flat.reshape(images.shape), labels


def _classification_step(method: str, xb, models, opt, cfg, rng: Rng):
    clf, dn, schedule = models["task"], models["diffusion"], models["schedule"]
    if method == "source_only":
        return source_only_step(xb, clf)
    if method == "entropy":
        return entropy_step(xb, clf, opt)
    if method == "diffusion_tta":
        return diffusion_tta_step(xb, clf, dn, schedule,
                                  cfg["diffusion_tta"]["n_timesteps"], opt, rng)
    budget = BudgetConfig(cfg["csm"]["k"], cfg["csm"]["m"])
    return adapt_step(xb, clf, dn, schedule, cfg["dusa"]["t"], budget, method,
                      opt, rng, kind=cfg["dusa"]["kind"],
                      grad_accum=cfg["adapt"]["grad_accum"],
                      temperature=cfg["csm"]["temperature"])


def _segmentation_step(method: str, xb, models, opt, cfg, rng: Rng):
    dl, dn, schedule = models["task"], models["diffusion"], models["schedule"]
    if method == "source_only":
        preds = np.argmax(dl.logits(xb), axis=-1)
        from .dusa import AdaptStepReport
        return AdaptStepReport(preds, 0.0, 0, 0, len(xb))
    if method == "dusa":
        return adapt_step_seg(xb, dl, dn, schedule, cfg["dusa"]["t"],
                              cfg["seg"]["budget"], opt, rng,
                              grad_accum=cfg["adapt"]["grad_accum"])
    raise ValueError(f"method '{method}' is not available for segmentation worlds")


def run_protocol(method: str, protocol: str, stream: StreamSpec,
                 checkpoints, cfg: dict, out_dir=None) -> RunRecord:
    """Stream corruption segments through one method under one protocol.

    ``fully`` restores checkpoint bytes (and fresh optimizer state) at
    every corruption boundary; ``continual`` carries models and optimizer
    state across segments.  Predictions are always recorded before the
    batch's update.  Persists CSV + manifest when ``out_dir`` is given.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    if protocol not in ("fully", "continual"):
        raise ValueError("protocol must be 'fully' or 'continual'")
    world = world_from_config(cfg)
    seg = isinstance(world, SegWorld)
    loaded = _load_checkpoints(cfg, world, checkpoints)
    run_id = f"{method}-{protocol}-{config_hash(cfg)}-s{stream.seed}"
    record = RunRecord(run_id, method, protocol,
                       config_hash=config_hash(cfg), seed=stream.seed)
    rng = Rng(stream.seed)

    models = None
    opt = None
    for ci, (kind, severity) in enumerate(stream.corruptions):
        if models is None or protocol == "fully":
            models = {"task": copy.deepcopy(loaded["task"]),
                      "diffusion": copy.deepcopy(loaded["diffusion"]),
                      "schedule": loaded["schedule"]}
            opt = Adam(lr=cfg["adapt"]["lr"])
        seg_rng = rng.child(f"segment-{ci}-{kind}-{severity}")
        x_all, y_all = _target_block(world, kind, severity,
                                     stream.samples_per_corruption, seg_rng)
        step_rng = seg_rng.child("steps")
        for bi, start in enumerate(range(0, len(x_all), stream.batch)):
            xb = x_all[start:start + stream.batch]
            yb = y_all[start:start + stream.batch]
            tic = time.perf_counter()
            step_fn = _segmentation_step if seg else _classification_step
            rep = step_fn(method, xb, models, opt, cfg, step_rng.child(f"b{bi}"))
            wall = (time.perf_counter() - tic) * 1000.0
            if seg:
                metric = mean_iou(rep.predictions, yb, world.n_classes)
            else:
                metric = float((rep.predictions == yb).mean())
            record.rows.append(BatchRow(kind, severity, bi, len(xb), metric,
                                        float(rep.loss_value),
                                        rep.denoiser_forwards,
                                        rep.denoiser_backwards, wall))
    record.aggregate()
    if out_dir is not None:
        write_run(record, out_dir, cfg)
    return record


def write_run(record: RunRecord, out_dir, cfg: dict) -> Path:
    """Persist the per-batch CSV (deterministic bytes) plus a manifest.

    Wall-clock times are volatile, so the CSV ``ms`` column is written
    as 0 unless ``timing.csv_ms`` is set; real timings always go to the
    manifest, which carries no byte-reproducibility promise.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{record.run_id}.csv"
    keep_ms = bool(get_key(cfg, "timing.csv_ms"))
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in record.rows:
            writer.writerow([
                record.run_id, record.method, record.protocol,
                row.corruption, row.severity, row.batch,
                f"{row.acc:.12g}", f"{row.loss:.12g}", row.fwd, row.bwd,
                f"{row.wall_ms:.3f}" if keep_ms else "0",
            ])
    manifest = {
        "run_id": record.run_id,
        "method": record.method,
        "protocol": record.protocol,
        "seed": record.seed,
        "config": cfg,
        "config_hash": record.config_hash,
        "per_corruption": record.per_corruption,
        "overall": record.overall,
        "total_wall_ms": sum(r.wall_ms for r in record.rows),
        "rows": len(record.rows),
    }
    with open(out_dir / f"{record.run_id}.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return csv_path


SWEEP_AXES = ("timestep", "budget", "batchSize")


def _apply_axis(cfg: dict, axis: str, value):
    if axis == "timestep":
        cfg["dusa"]["t"] = int(value)
    elif axis == "budget":
        b = int(value)
        if b < 1:
            raise ValueError("budget must be >= 1")
        m = min(cfg["csm"]["m"], b - 1)
        cfg["csm"]["k"], cfg["csm"]["m"] = b - m, m
    elif axis == "batchSize":
        cfg["stream"]["batch"] = int(value)
    else:
        raise ValueError(f"sweep axis must be one of {SWEEP_AXES}")


def sweep(axis: str, values, base_cfg: dict, out_dir, checkpoints=None) -> list:
    """One run per axis value over a shared world and checkpoints."""
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if checkpoints is None:
        checkpoints = out_dir / "checkpoints"
        pretrain(base_cfg, checkpoints)
    records = []
    for value in values:
        cfg = copy.deepcopy(base_cfg)
        _apply_axis(cfg, axis, value)
        stream = stream_spec_from_config(cfg)
        record = run_protocol(cfg["method"], cfg["protocol"], stream,
                              checkpoints, cfg, out_dir=out_dir)
        records.append((value, record))
    summary = out_dir / f"sweep_{axis}.csv"
    with open(summary, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([axis, "overall_acc", "run_id"])
        for value, record in records:
            writer.writerow([value, f"{record.overall:.12g}", record.run_id])
    return [record for _, record in records]


def report(in_dir, out_dir=None) -> dict:
    """Aggregate raw per-batch rows into a corruption-by-method table.

    Reads every run CSV under ``in_dir``, recomputes sample-weighted
    aggregates from the raw rows, and writes ``aggregate_table.csv``
    (one row per method, one column per corruption plus the mean).
    """
    in_dir = Path(in_dir)
    out_dir = Path(out_dir) if out_dir is not None else in_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    table: dict[str, dict[str, list]] = {}
    for csv_path in sorted(in_dir.glob("*.csv")):
        if csv_path.name.startswith(("sweep_", "aggregate_")):
            continue
        # Per-batch sample counts are reconstructed from the run manifest
        # (batch size and segment length), since n is not a CSV column.
        manifest_path = csv_path.with_suffix(".json")
        batch_size = samples = None
        if manifest_path.exists():
            with open(manifest_path, encoding="utf-8") as fh:
                stream_cfg = json.load(fh)["config"]["stream"]
            batch_size = stream_cfg["batch"]
            samples = stream_cfg["samples_per_corruption"]
        with open(csv_path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                if batch_size is None:
                    n = 1
                else:
                    start = int(row["batch"]) * batch_size
                    n = min(batch_size, samples - start)
                cell = table.setdefault(row["method"], {}).setdefault(
                    row["corruption"], [0.0, 0])
                cell[0] += float(row["acc"]) * n
                cell[1] += n
    if not table:
        raise ValueError(f"no run CSV files under {in_dir}")
    corruptions = sorted({c for per in table.values() for c in per})
    out_path = out_dir / "aggregate_table.csv"
    aggregates: dict[str, dict[str, float]] = {}
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", *corruptions, "avg"])
        for method in sorted(table):
            per = {}
            for kind in corruptions:
                if kind in table[method]:
                    total, count = table[method][kind]
                    per[kind] = total / count
            row = [method] + [f"{per[k]:.12g}" if k in per else "" for k in corruptions]
            avg = float(np.mean(list(per.values())))
            writer.writerow(row + [f"{avg:.12g}"])
            aggregates[method] = {**per, "avg": avg}
    return {"table": aggregates, "path": out_path}
