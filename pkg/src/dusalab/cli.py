"""Command line entry points.

Subcommands: ``pretrain`` (train + checkpoint source models), ``adapt``
(one online run producing a CSV and manifest), ``verify`` (identity and
gradient suites; nonzero exit on failure), ``sweep`` (one run per axis
value) and ``report`` (aggregate tables from run directories).  Every
configuration key can be overridden with a flag of the same dotted name,
e.g. ``--dusa.t 50 --csm.k 4``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import apply_overrides, load_config
from .runner import (SWEEP_AXES, pretrain, report, run_protocol, sweep,
                     stream_spec_from_config)
from .verify import run_suites


def _split_overrides(extra):
    """Turn ['--dusa.t', '100', '--csm.k=4'] into [('dusa.t','100'), ...]."""
    pairs = []
    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--"):
            raise SystemExit(f"unexpected argument '{token}'")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            i += 1
            if i >= len(extra):
                raise SystemExit(f"flag --{key} needs a value")
            value = extra[i]
        pairs.append((key, value))
        i += 1
    return pairs


def _config_from(args, extra) -> dict:
    cfg = load_config(args.config)
    overrides = _split_overrides(extra)
    if getattr(args, "method", None):
        cfg["method"] = args.method
    if getattr(args, "protocol", None):
        cfg["protocol"] = args.protocol
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "out", None):
        cfg["out"] = args.out
    apply_overrides(cfg, overrides)
    return cfg


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="dusalab",
        description="Desk-scale diffusion-score test-time adaptation lab")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None, help="output directory")

    p_pre = sub.add_parser("pretrain", parents=[common],
                           help="train and checkpoint source models")

    p_adapt = sub.add_parser("adapt", parents=[common],
                             help="run one online adaptation stream")
    p_adapt.add_argument("--method", choices=["source_only", "entropy",
                                              "diffusion_tta", "dusa", "dusa_u"])
    p_adapt.add_argument("--protocol", choices=["fully", "continual"])
    p_adapt.add_argument("--checkpoints", default=None,
                         help="checkpoint directory (default: <out>/checkpoints)")

    p_verify = sub.add_parser("verify", help="run identity/gradient suites")
    p_verify.add_argument("--suite", choices=["oracle", "gradients", "all"],
                          default="all")
    p_verify.add_argument("--fast", action="store_true",
                          help="smaller sweeps for a quick check")

    p_sweep = sub.add_parser("sweep", parents=[common],
                             help="run a parameter sweep")
    p_sweep.add_argument("--axis", choices=list(SWEEP_AXES), required=True)
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated axis values")
    p_sweep.add_argument("--method", default=None)
    p_sweep.add_argument("--protocol", default=None)
    p_sweep.add_argument("--checkpoints", default=None)

    p_report = sub.add_parser("report", help="aggregate run CSVs")
    p_report.add_argument("--in", dest="in_dir", required=True)
    p_report.add_argument("--out", dest="out", default=None)

    args, extra = parser.parse_known_args(argv)

    if args.command == "verify":
        results = run_suites(args.suite, fast=args.fast)
        print(json.dumps(results, indent=2))
        return 0 if results["passed"] else 1

    if args.command == "report":
        out = report(args.in_dir, args.out)
        print(f"wrote {out['path']}")
        return 0

    cfg = _config_from(args, extra)
    out_dir = Path(cfg["out"])

    if args.command == "pretrain":
        manifests = pretrain(cfg, out_dir / "checkpoints")
        print(json.dumps({k: v for k, v in manifests.items()
                          if isinstance(v, str)}, indent=2))
        print(f"checkpoints written to {out_dir / 'checkpoints'}")
        return 0

    if args.command == "adapt":
        checkpoints = args.checkpoints or out_dir / "checkpoints"
        stream = stream_spec_from_config(cfg)
        record = run_protocol(cfg["method"], cfg["protocol"], stream,
                              checkpoints, cfg, out_dir=out_dir)
        print(f"run {record.run_id}: overall={record.overall:.4f} "
              f"per-corruption={ {k: round(v, 4) for k, v in record.per_corruption.items()} }")
        return 0

    if args.command == "sweep":
        checkpoints = args.checkpoints
        values = [v.strip() for v in args.values.split(",") if v.strip()]
        records = sweep(args.axis, values, cfg, out_dir, checkpoints=checkpoints)
        for value, record in zip(values, records):
            print(f"{args.axis}={value}: overall={record.overall:.4f}")
        return 0

    parser.error(f"unknown command {args.command}")
    return 2


if __name__ == "__main__":
    sys.exit(main())
