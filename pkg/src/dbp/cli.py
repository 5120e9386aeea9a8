"""Command-line interface.

Subcommands: generate, pretrain, finetune, sweep, report.
Exit codes: 0 success, 2 config error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .config import ExperimentConfig, load_config
from .errors import (
    CompatError, ConfigError, FormatError, GenerationError, NumericalAbort,
    ParseError, SplitError,
)
from .harness import cmd_finetune, cmd_generate, cmd_pretrain, cmd_report, cmd_sweep

_DATA_ERRORS = (ParseError, GenerationError, SplitError, FormatError,
                CompatError, FileNotFoundError, IsADirectoryError,
                PermissionError)


def _float_list(raw: str):
    try:
        return [float(tok) for tok in raw.split(",") if tok.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated float list: {raw!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dbp",
        description="Delayed-bottlenecking pre-training and fine-tuning "
                    "for small graph neural networks.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="key=value config file (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        if data:
            p.add_argument("--data", required=True, help="dataset file path")

    p = sub.add_parser("generate", help="write a synthetic dataset + split manifest")
    common(p, data=False)
    p.add_argument("--out", required=True, help="output dataset path")

    p = sub.add_parser("pretrain", help="self-supervised pre-training")
    common(p)
    p.add_argument("--ckpt-out", required=True, help="checkpoint output path")
    p.add_argument("--out", help="metrics CSV output path")
    p.add_argument("--timing", action="store_true",
                   help="record wall_ms (breaks byte-identical reruns)")

    p = sub.add_parser("finetune", help="information-controlled fine-tuning")
    common(p)
    p.add_argument("--ckpt-in", help="pre-training checkpoint to transfer from")
    p.add_argument("--ckpt-out", required=True, help="checkpoint output path")
    p.add_argument("--out", help="metrics CSV output path")
    p.add_argument("--no-transfer", action="store_true",
                   help="start from a fresh encoder (no pre-training baseline)")
    p.add_argument("--timing", action="store_true",
                   help="record wall_ms (breaks byte-identical reruns)")

    p = sub.add_parser("sweep", help="alpha x beta x seed grid of full pipelines")
    common(p)
    p.add_argument("--alphas", type=_float_list, required=True)
    p.add_argument("--betas", type=_float_list, required=True)
    p.add_argument("--seeds", type=int, default=5, help="seeds per cell")
    p.add_argument("--out", required=True, help="summary CSV output path")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    p = sub.add_parser("report", help="render per-figure CSV extracts")
    p.add_argument("metrics", nargs="*", help="metrics CSV files to extract from")
    p.add_argument("--sweep", help="sweep summary CSV")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def _load(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        config = replace(config, seed=args.seed)
    config.validate()
    return config


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "generate":
            cmd_generate(_load(args), args.out)
        elif args.command == "pretrain":
            cmd_pretrain(_load(args), args.data, args.ckpt_out,
                         metrics_out=args.out, timing=args.timing)
        elif args.command == "finetune":
            if not args.no_transfer and args.ckpt_in is None:
                raise ConfigError("finetune needs --ckpt-in unless --no-transfer is set")
            cmd_finetune(_load(args), args.data, args.ckpt_in, args.ckpt_out,
                         metrics_out=args.out, no_transfer=args.no_transfer,
                         timing=args.timing)
        elif args.command == "sweep":
            cmd_sweep(_load(args), args.data, args.alphas, args.betas,
                      args.seeds, args.out, jobs=args.jobs)
        elif args.command == "report":
            cmd_report(args.metrics, args.sweep, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
