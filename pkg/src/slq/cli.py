"""Command-line entry point: ``slq {pretrain,adapt,eval,ablate,diagnose} --config run.toml``."""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from . import checkpoint as ckpt
from . import pipeline
from .config import RunConfig, config_from_dict, load_config
from .errors import ConfigError, ContaminationError, IntegrityError, SLQError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INTEGRITY = 3
EXIT_CONTAMINATION = 4

COMMANDS = ("pretrain", "adapt", "eval", "ablate", "diagnose")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slq", description="Shared latent query retrieval adapters at desk scale.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", type=Path, help="TOML run config (defaults apply when omitted)")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", type=Path, help="override output.dir")
    parser.add_argument("--steps", type=int, help="override pretrain.steps (pretrain) or trainer.total_steps")
    parser.add_argument("--backbone", type=Path, help="backbone checkpoint (default: <out>/backbone.slq)")
    parser.add_argument("--adapter", type=Path, help="adapter checkpoint for eval (default: <out>/adapter.slq)")
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")
    return parser


def resolve(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output = dataclasses.replace(cfg.output, dir=str(args.out))
    if args.steps is not None:
        if args.steps < 0:
            raise ConfigError("--steps must be >= 0")
        if args.command == "pretrain":
            cfg.pretrain = dataclasses.replace(cfg.pretrain, steps=args.steps)
        else:
            cfg.trainer = dataclasses.replace(cfg.trainer, total_steps=args.steps)
    return cfg.validate()


def run(args: argparse.Namespace) -> int:
    cfg = resolve(args)
    log = (lambda msg: None) if args.quiet else (lambda msg: print(msg, flush=True))
    out = Path(cfg.output.dir)
    if args.command == "pretrain":
        pipeline.run_pretrain(cfg, log)
        return EXIT_OK
    backbone = ckpt.load_backbone(args.backbone or out / "backbone.slq")
    if args.command == "adapt":
        pipeline.run_adapt(cfg, backbone, log)
    elif args.command == "eval":
        readout, _, meta = ckpt.load_adapter(args.adapter or out / "adapter.slq", dtype=backbone.dtype)
        if meta.get("backbone_checksum") not in (None, backbone.recorded_checksum):
            raise IntegrityError("adapter was trained against a different backbone")
        pipeline.run_eval(cfg, backbone, readout, meta.get("train_ids", []), log)
    elif args.command == "ablate":
        pipeline.run_ablate(cfg, backbone, log)
    elif args.command == "diagnose":
        pipeline.run_diagnose(cfg, backbone, log)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except ContaminationError as exc:
        print(f"contamination error: {exc}", file=sys.stderr)
        return EXIT_CONTAMINATION
    except SLQError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
