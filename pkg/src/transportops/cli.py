"""Command-line driver for the experiment pipeline.

Subcommands mirror the pipeline phases. ``--config`` takes either a JSON
config path or a built-in name such as ``circles`` or
``rotated_mnist:desk``. Failures exit nonzero after printing one
machine-readable JSON error line to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import TransportOpsError
from .pipeline import (
    resolve_config,
    run_eval,
    run_gen_data,
    run_phase_autoencoder,
    run_phase_finetune,
    run_phase_operators,
    run_report,
)


def _add_common(parser: argparse.ArgumentParser, *, needs_out=True) -> None:
    parser.add_argument("--config", required=True,
                        help="config JSON path or built-in name "
                             "(e.g. circles, rotated_mnist:desk)")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--data-dir", default="data",
                        help="dataset directory (default: data)")
    if needs_out:
        parser.add_argument("--out-dir", default="runs/out",
                            help="output directory (default: runs/out)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="transportops",
        description="Train and evaluate transport-operator autoencoders.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("gen-data", "materialize datasets"),
                       ("train-ae", "autoencoder training phase"),
                       ("train-ops", "transport-operator training phase"),
                       ("fine-tune", "joint fine-tuning phase"),
                       ("eval", "evaluation metrics")):
        _add_common(sub.add_parser(name, help=text))
    report = sub.add_parser("report", help="summarize a run directory")
    report.add_argument("--out-dir", default="runs/out")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            print(run_report(args.out_dir))
            return 0
        config = resolve_config(args.config)
        if args.seed is not None:
            config.seed = args.seed
        if args.command == "gen-data":
            paths = run_gen_data(config, args.data_dir)
            for name, path in sorted(paths.items()):
                print(f"{name}: {path}")
        elif args.command == "train-ae":
            print(run_phase_autoencoder(config, args.data_dir, args.out_dir))
        elif args.command == "train-ops":
            print(run_phase_operators(config, args.data_dir, args.out_dir))
        elif args.command == "fine-tune":
            for path in run_phase_finetune(config, args.data_dir,
                                           args.out_dir):
                print(path)
        elif args.command == "eval":
            summary = run_eval(config, args.data_dir, args.out_dir)
            print(json.dumps(summary, indent=2, sort_keys=True))
    except TransportOpsError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
