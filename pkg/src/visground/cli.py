"""Command-line entry point: gen, train, eval, gradcheck, viz.

Exit status is 0 on success, 1 for usage errors and 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .data import load_dataset, write_dataset
from .errors import ConfigError, GroundingError
from .model import ModelConfig
from .train import TrainConfig, evaluate, load_model, train

log = logging.getLogger("visground")

MODEL_FIELDS = {f.name for f in fields(ModelConfig)}
TRAIN_FIELDS = {f.name for f in fields(TrainConfig)} - {"model"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with 2; usage errors are 1 here
        raise UsageError(f"{self.prog}: error: {message}")


def run_config(flat: dict) -> TrainConfig:
    """Build a TrainConfig from a flat mapping of training and model fields."""
    unknown = sorted(set(flat) - MODEL_FIELDS - TRAIN_FIELDS)
    if unknown:
        raise ConfigError(f"unknown config field {unknown[0]!r}")
    model = {k: v for k, v in flat.items() if k in MODEL_FIELDS}
    rest = {k: v for k, v in flat.items() if k in TRAIN_FIELDS}
    try:
        return TrainConfig(model=ModelConfig(**model), **rest)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def flatten(config: TrainConfig) -> dict:
    d = config.to_dict()
    model = d.pop("model")
    return {**d, **model}


def _cmd_gen(args) -> int:
    path = write_dataset(args.n, args.seed, args.out)
    print(f"wrote {args.n} samples to {path}", file=sys.stderr)
    return 0


def _cmd_train(args) -> int:
    flat = {}
    if args.config:
        flat = json.loads(Path(args.config).read_text())
        if not isinstance(flat, dict):
            raise ConfigError("config file must hold a JSON object")
    for key in ("epochs", "seed", "max_steps"):
        if getattr(args, key) is not None:
            flat[key] = getattr(args, key)
    if args.no_verification:
        flat["use_verification"] = False
    if args.no_context:
        flat["use_context"] = False
    if args.stages is not None:
        flat["num_stages"] = args.stages
    config = run_config(flat)
    if not Path(args.data).is_file():
        raise FileNotFoundError(f"dataset {args.data} not found")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(flatten(config), indent=2, sort_keys=True) + "\n")
    ckpt, metrics = train(config, args.data, out)
    print(json.dumps({"checkpoint": str(ckpt), "metrics": str(metrics)}))
    return 0


def _cmd_eval(args) -> int:
    print(json.dumps(evaluate(args.ckpt, args.data), sort_keys=True))
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    report = run_gradcheck(seeds=args.seeds, full_entries=args.full_entries or None, corrupt=args.corrupt_adjoint)
    if args.json:
        print(json.dumps(report.to_dict(), sort_keys=True))
    else:
        print("\n".join(report.lines()))
        print(f"{'passed' if report.passed else 'FAILED'} in {report.seconds:.1f}s (threshold {report.threshold:g})")
    return 0 if report.passed else 2


def _cmd_viz(args) -> int:
    from .viz import export_maps

    samples = load_dataset(args.data)
    if not 0 <= args.index < len(samples):
        raise IndexError(f"index {args.index} outside dataset of {len(samples)} samples")
    for path in export_maps(load_model(args.ckpt), samples[args.index], args.out_dir):
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="visground", description="Toy visual grounding: data, training, evaluation, checks.",
                     formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic dataset", formatter_class=fmt)
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--seed", type=int, default=0, help="base seed")
    p.add_argument("--out", required=True, help="output JSONL path")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="train a model", formatter_class=fmt)
    p.add_argument("--config", default=None, help="flat JSON of training and model fields")
    p.add_argument("--data", required=True, help="training dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int, default=None, help="override epochs")
    p.add_argument("--seed", type=int, default=None, help="override seed")
    p.add_argument("--max-steps", type=int, default=None, help="stop after this many optimizer steps")
    p.add_argument("--no-verification", action="store_true", help="disable the verification module")
    p.add_argument("--no-context", action="store_true", help="disable the context encoder")
    p.add_argument("--stages", type=int, default=None, help="number of decoder stages")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint", formatter_class=fmt)
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="dataset path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every component", formatter_class=fmt)
    p.add_argument("--micro-config", action="store_true", default=True,
                   help="use the micro model (C=8, 2 heads, N=2, 2x2 map); the only supported size")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds")
    p.add_argument("--full-entries", type=int, default=4,
                   help="components probed per tensor in the end-to-end check (0 = all)")
    p.add_argument("--corrupt-adjoint", default=None, metavar="OP",
                   help="test hook: scale the adjoint of OP by 1.01 to show the check fails")
    p.add_argument("--json", action="store_true", help="print the report as JSON")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("viz", help="export score and attention maps as PPM", formatter_class=fmt)
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="dataset path")
    p.add_argument("--index", type=int, default=0, help="sample index")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.set_defaults(func=_cmd_viz)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:  # a bad config is a usage problem
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (GroundingError, OSError, ValueError, KeyError, IndexError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
