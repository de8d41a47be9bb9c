"""Command-line entry point: ``preaa {gen,train,eval,sweep,bench}``."""

from __future__ import annotations

import argparse
import sys

from . import harness
from .harness import ExperimentConfig


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.out is not None:
        changes["out_dir"] = args.out
    if args.seed is not None:
        changes["seed"] = args.seed
    return cfg.replace(**changes) if changes else cfg


def _values(raw: str | None) -> list[str]:
    return [v.strip() for v in raw.split(",") if v.strip()] if raw else []


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="preaa", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config; flags override its values")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="experiment seed")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="write train/eval clips")
    p = sub.add_parser("train", parents=[common], help="train one stage")
    p.add_argument("--stage", choices=["1", "2", "joint"], default="1")
    p = sub.add_parser("eval", parents=[common], help="per-clip metrics CSV")
    p.add_argument("--checkpoint", help="checkpoint file (default: latest under --out)")
    p = sub.add_parser("sweep", parents=[common], help="ablation sweep along one axis")
    p.add_argument("--axis", required=True, choices=sorted(harness.SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma-separated values")
    p = sub.add_parser("bench", parents=[common], help="latency and FLOP benchmark")
    p.add_argument("--values", help="comma-separated frame counts (default: config bench_frames)")
    p.add_argument("--checkpoint", help="optional trained checkpoint")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        if args.command == "gen":
            paths = harness.cmd_gen(cfg)
            print(f"wrote {len(paths)} clips under {cfg.out / 'clips'}")
        elif args.command == "train":
            res = harness.cmd_train(cfg, args.stage)
            print(f"checkpoint {res['checkpoint']}\ncurve {res['curve']}")
        elif args.command == "eval":
            print(harness.cmd_eval(cfg, args.checkpoint))
        elif args.command == "sweep":
            print(harness.cmd_sweep(cfg, args.axis, _values(args.values)))
        else:
            frames = [int(v) for v in _values(args.values)] or None
            print(harness.cmd_bench(cfg, frames, args.checkpoint))
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0
