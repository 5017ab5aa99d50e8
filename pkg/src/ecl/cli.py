"""Command-line entry point: ``ecl {simulate,train,ablate,verify,report}``.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 training
divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, resolve
from .model import TrainingDivergence

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _global_flags(parser, default):
    # subcommands repeat the flags with SUPPRESS so values given before the
    # subcommand are not reset
    parser.add_argument("--config", default=default, help="YAML experiment config (defaults when omitted)")
    parser.add_argument("--seed", type=int, default=default, help="base seed (overrides training.seed)")
    parser.add_argument("--out", default=default,
                        help="output directory (overrides ECL_OUT_DIR and output.dir)")
    parser.add_argument("-v", "--verbose", action="store_true",
                        default=False if default is None else default)
    return parser


def build_parser():
    common = _global_flags(argparse.ArgumentParser(add_help=False), argparse.SUPPRESS)
    p = _global_flags(_Parser(prog="ecl", description="Expectation consistency calibration experiments"),
                      None)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("simulate", parents=[common], help="write source/target datasets as CSV")
    sub.add_parser("train", parents=[common], help="train Uncal, Soft-ECE and ECL arms")
    ab = sub.add_parser("ablate", parents=[common], help="gamma sweep or trainable-vs-naive")
    ab.add_argument("which", nargs="?", default="gamma-sweep")
    ve = sub.add_parser("verify", parents=[common], help="numeric theorem checks")
    ve.add_argument("which", nargs="?", default="all")
    rp = sub.add_parser("report", parents=[common], help="re-render metrics from a checkpoint")
    rp.add_argument("checkpoint")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from . import pipeline

    try:
        cfg = resolve(args.config, args.seed, args.out)
        if args.command == "simulate":
            result = pipeline.simulate(cfg)
        elif args.command == "train":
            result = pipeline.run_experiment(cfg)["rows"]
        elif args.command == "ablate":
            result = pipeline.run_ablation(cfg, args.which)["rows"]
        elif args.command == "verify":
            docs = pipeline.run_verification(cfg, args.which)
            result = {k: {"as_designed": d["as_designed"],
                          "checks": [(r["instance"], r["passed"]) for r in d["reports"]]}
                      for k, d in docs.items()}
        else:
            result = pipeline.report_from_checkpoint(args.checkpoint, cfg.output.dir).to_dict()
            result.pop("config", None)
    except ConfigError as exc:
        print(f"ecl: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergence as exc:
        print(f"ecl: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    print(json.dumps(result, indent=1, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
