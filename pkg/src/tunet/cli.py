"""Command-line entry point.

Exit codes: 0 success, 1 gradient check failed, 2 configuration or argument
error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys

from . import autodiff as ad
from .config import RunConfig, load_run_config
from .data import load_samples, save_samples, split_dataset, synth_dataset
from .errors import (
    ConfigError,
    ContractError,
    FormatError,
    IntegrityError,
    SchemaError,
    TUnetError,
    ValidationError,
)
from .formats import load_checkpoint, load_tensor, save_tensor
from .gradcheck import gradcheck_model
from .metrics import CSV_HEADER, binarize
from .model import forward
from .train import evaluate_split, train

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _dataset(run: RunConfig):
    if run.data.source == "synth":
        samples = synth_dataset(run.train.seed, run.data.count, run.model.height)
    else:
        samples = load_samples(run.data.path, raw=run.data.raw)
    if not samples:
        raise ConfigError("dataset is empty")
    return split_dataset(samples, run.data.val_fraction, run.train.seed)


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    train_set, val_set = _dataset(run)
    result = train(run.model, run.train, train_set, val_set, out_dir=args.out)
    if result.log:
        last = result.log[-2]
        print(f"final train loss {last.loss:.6f} dice {last.report.dice:.6f} after {result.steps} steps")
    else:
        print("no epochs run; initial parameters checkpointed")
    return EXIT_OK


def cmd_eval(args) -> int:
    run = load_run_config(args.config)
    params, _ = load_checkpoint(args.ckpt, run.model)
    params = params.astype(run.train.dtype)
    if args.data:
        samples = load_samples(args.data, raw=run.data.raw)
        split = "eval"
    else:
        train_set, val_set = _dataset(run)
        samples = train_set if args.split == "train" else val_set
        split = args.split
    samples = [s.astype(run.train.dtype) for s in samples]
    threshold = run.threshold if args.threshold is None else args.threshold
    loss, report = evaluate_split(params, run.model, samples, threshold)
    print(CSV_HEADER)
    print(report.csv_row(-1, split, loss))
    return EXIT_OK


def cmd_infer(args) -> int:
    params, config = load_checkpoint(args.ckpt)
    image = load_tensor(args.input).data
    expected = (config.channels, config.height, config.width)
    if image.shape != expected:
        raise ConfigError(f"input shape {image.shape} does not match checkpoint config {expected}")
    with ad.no_grad():
        prob = forward(image.astype(params.dtype), params, config).data
    save_tensor(args.out, prob)
    if args.mask:
        save_tensor(args.mask, binarize(prob, args.threshold).astype(prob.dtype))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.samples < 1:
        raise ConfigError(f"--samples must be positive, got {args.samples}")
    run = load_run_config(args.config)
    seed = run.train.seed if args.seed is None else args.seed
    guard = ad.corrupt_backward(args.corrupt_op) if args.corrupt_op else contextlib.nullcontext()
    with guard:
        result = gradcheck_model(run.model, samples=args.samples, seed=seed, step=args.step)
    worst = result.worst
    print(
        f"checked {len(result.checks)} coordinates; worst relative error "
        f"{worst.rel_error:.3e} at {worst.name}{list(worst.index)} "
        f"(analytic {worst.analytic:.6e}, numeric {worst.numeric:.6e}); "
        f"tolerance {result.tolerance:g}: {'PASS' if result.passed else 'FAIL'}"
    )
    return EXIT_OK if result.passed else EXIT_CHECK_FAILED


def cmd_synth(args) -> int:
    if args.count < 0:
        raise ConfigError(f"--count must be non-negative, got {args.count}")
    samples = synth_dataset(args.seed, args.count, args.size)
    save_samples(args.out, samples)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="tunet", description="Transformer-Unet binary segmentation on a numpy autodiff engine.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    p = sub.add_parser("train", help="train a model from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="directory for metrics.csv, last.ckpt, best.ckpt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print one CSV metrics row for a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", help="directory of img_/msk_ TensorFile pairs (default: config data)")
    p.add_argument("--split", choices=("train", "val"), default="val",
                   help="split of the config dataset to use when --data is absent")
    p.add_argument("--threshold", type=float, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="write probability map and mask for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask")
    p.add_argument("--threshold", type=float, default=0.8)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="compare backprop with central differences (64-bit)")
    p.add_argument("--config", required=True)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--corrupt-op", default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic ellipse dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, SchemaError, ContractError, ValidationError) as exc:
        print(f"tunet {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, IntegrityError, TUnetError, OSError, FloatingPointError) as exc:
        print(f"tunet {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
