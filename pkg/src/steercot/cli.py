"""Command-line entry point: ``steercot <subcommand> [--config PATH] [--seed S] [--workers N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import yaml

from . import pipeline
from .config import load_config
from .errors import InputError, SteerCotError
from .evaluator import AesParams, aes, aes_values, read_report

SUBCOMMANDS = {
    "gen-data": "generate the synthetic arithmetic corpus",
    "pretrain": "style-pretrain the toy model on cue-conditioned targets",
    "extract-direction": "capture contrastive activations and difference-in-means directions",
    "diagnose": "per-layer PCA, separation and angle variance; pick the anchor layer",
    "probe": "sweep block size and alpha on the pilot split",
    "sample": "generate baseline and steered variants for training questions",
    "verify": "filter samples by gold answer or self-consistency",
    "curriculum": "train adapters through the ten compression stages",
    "sft": "ablation: train adapters on shortest-only data",
    "eval": "evaluate baseline and trained adapters on the test split",
    "aes": "accuracy-efficiency score of one report (or values) against a baseline",
    "pipeline": "run every stage in order and write a digest manifest",
}


def _override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), yaml.safe_load(value)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="steercot", description="Length-steered chain-of-thought compression on a toy model.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="YAML config file")
        p.add_argument("--seed", type=int, help="run seed (unsigned 64-bit)")
        p.add_argument("--workers", type=int, help="parallel workers (default: logical cores)")
        p.add_argument("--out", type=Path, default=Path("run"), help="artifact directory")
        p.add_argument("--set", dest="overrides", type=_override, action="append", default=[], metavar="SECTION.KEY=VALUE")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "aes":
            p.add_argument("--base", type=Path, help="baseline eval report (default: OUT/eval_baseline.json)")
            p.add_argument("--method", type=Path, help="method eval report (default: OUT/eval_curriculum.json)")
            p.add_argument("--values", type=float, nargs=4, metavar=("BASE_ACC", "BASE_LEN", "ACC", "LEN"))
    return parser


def _aes(args, cfg) -> dict:
    if args.values:
        return {"aes": aes_values(*args.values, AesParams())}
    base = read_report(args.base or args.out / "eval_baseline.json")
    method = read_report(args.method or args.out / "eval_curriculum.json")
    return {"aes": aes(base, method), "base": [base.accuracy, base.mean_length], "method": [method.accuracy, method.mean_length]}


def _summary(result):
    if result is None or isinstance(result, (int, float, str)):
        return result
    if isinstance(result, dict):
        return {k: _summary(v) for k, v in result.items()}
    if hasattr(result, "to_dict"):
        d = result.to_dict()
        d.pop("per_item", None)
        d.pop("grid", None)
        return d
    return str(result)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = dict(args.overrides)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise InputError("--seed must be an unsigned 64-bit integer")
            overrides["seed"] = args.seed
        if args.workers is not None:
            if args.workers < 1:
                raise InputError("--workers must be >= 1")
            overrides["workers"] = args.workers
        cfg = load_config(args.config, overrides)
        args.out.mkdir(parents=True, exist_ok=True)
        if args.command == "aes":
            result = _aes(args, cfg)
        elif args.command == "pipeline":
            result = {"artifacts": len(pipeline.run_pipeline(cfg, args.out)["artifacts"])}
        else:
            result = pipeline.STAGES[args.command](cfg, args.out)
        print(json.dumps({"command": args.command, "result": _summary(result)}, default=str, sort_keys=True))
        return 0
    except SteerCotError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
