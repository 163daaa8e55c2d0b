"""Command-line entry point: ``lanequant <command> [--config FILE] [--section.key=value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, is_dataclass
from pathlib import Path

from . import pipeline
from .config import ConfigError, ExperimentConfig, load_config
from .model import DivergenceError
from .ptq import NumericFailure

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4

COMMANDS = {
    "gen-data": "generate the synthetic train/val dataset",
    "pretrain": "train the full-precision detector",
    "calibrate": "calibrate frozen quantization scales for quant.bits and seed",
    "tune": "tune a calibrated net with focus.objective",
    "eval": "evaluate a checkpoint on the val split",
    "sensitivity": "build noise-score curves for the semantic heads",
    "score": "Lane Distortion Score between two lanes JSON files",
    "ablate": "run every (bits, objective, seed) cell and write the comparison tables",
}


def _config_keys(obj=None, prefix="") -> list[tuple[str, object]]:
    obj = obj or ExperimentConfig()
    out = []
    for f in fields(obj):
        v = getattr(obj, f.name)
        if is_dataclass(v):
            out += _config_keys(v, f"{prefix}{f.name}.")
        else:
            out.append((prefix + f.name, v))
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lanequant",
        description="Post-training quantization toolkit for a keypoint lane detector.",
        epilog=f"Exit codes: 0 ok, 2 config error, 3 missing artifact, 4 numeric failure. "
               f"{pipeline.WORKERS_ENV} caps the number of worker processes.")
    parser.add_argument("command", choices=list(COMMANDS), metavar="command",
                        help="; ".join(f"{k}: {v}" for k, v in COMMANDS.items()))
    parser.add_argument("inputs", nargs="*", help="score: two lanes JSON files")
    parser.add_argument("--config", type=Path, help="TOML experiment config")
    parser.add_argument("--checkpoint", type=Path, help="eval: checkpoint to evaluate (default: fp.ckpt)")
    parser.add_argument("--out", type=Path, help="output path override")
    parser.add_argument("--workers", type=int, help="worker processes for sensitivity/ablate")
    parser.add_argument("-v", "--verbose", action="store_true")
    group = parser.add_argument_group("config overrides (--section.key=value)")
    for key, default in _config_keys():
        group.add_argument(f"--{key}", dest=f"override:{key}", metavar="V", help=f"default {default!r}")
    return parser


def _overrides(ns: argparse.Namespace) -> list[str]:
    return [f"{k.split(':', 1)[1]}={v}" for k, v in vars(ns).items() if k.startswith("override:") and v is not None]


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(ns.config, _overrides(ns))
        result = _dispatch(ns, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericFailure, DivergenceError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if result is not None:
        print(json.dumps(result, indent=1, sort_keys=True))
    return EXIT_OK


def _dispatch(ns: argparse.Namespace, cfg: ExperimentConfig):
    cmd = ns.command
    if cmd == "score":
        if len(ns.inputs) != 2:
            raise ConfigError("score needs exactly two lanes JSON files")
        report = pipeline.score_files(Path(ns.inputs[0]), Path(ns.inputs[1]), cfg)
        if ns.out:
            pipeline._write_json(ns.out, report)
        return report
    if ns.inputs:
        raise ConfigError(f"{cmd} takes no positional arguments")
    if cmd == "gen-data":
        return {"manifest": str(pipeline.gen_data(cfg)), **pipeline._stamp(cfg)}
    if cmd == "pretrain":
        return pipeline.pretrain(cfg)
    if cmd == "calibrate":
        return pipeline.calibrate(cfg, ns.out)
    if cmd == "tune":
        return pipeline.tune(cfg, ns.out)
    if cmd == "eval":
        return pipeline.evaluate_checkpoint(cfg, ns.checkpoint, ns.out)
    if cmd == "sensitivity":
        curves = pipeline.sensitivity(cfg, ns.out, ns.workers)
        return {h: c.to_dict() for h, c in curves.items()}
    if cmd == "ablate":
        return pipeline.ablate(cfg, ns.workers)["summary"]
    raise ConfigError(f"unknown command {cmd}")  # pragma: no cover


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
