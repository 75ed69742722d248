"""Command-line front end: ``wcmorph <stage> [options]``.

Exit codes: 0 success, 2 argument error, 3 missing upstream artifact,
4 artifact format error. Log verbosity comes from ``WCMORPH_LOG``
(``DEBUG``, ``INFO``, ``WARNING``, ...; default ``INFO``).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import pipeline
from .config import RunConfig
from .errors import FormatError, StageDependencyError

EXIT_OK = 0
EXIT_ARGS = 2
EXIT_DEPENDENCY = 3
EXIT_FORMAT = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wcmorph", description="Worst-case face morph experiments on synthetic faces.")
    parser.add_argument("command", choices=pipeline.STAGES + ("run",), help="stage to run; 'run' executes every stage in order")
    parser.add_argument("--config", help="key=value config file (defaults are used for missing keys)")
    parser.add_argument("--seed", type=int, help="run seed (overrides the config)")
    parser.add_argument("--out", default="wcmorph-run", help="run directory (default: %(default)s)")
    parser.add_argument("--epochs", type=int, help="training epochs for train-fr or train-morpher")
    parser.add_argument("--pairs", type=int, help="number of morph pairs")
    parser.add_argument("--iters", type=int, help="refinement iterations")
    parser.add_argument("--step", type=float, help="refinement step size")
    parser.add_argument("--role", choices=pipeline.ROLES, help="FR system for train-fr / calibrate")
    return parser


def _config(args) -> RunConfig:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {"seed": args.seed, "pairs": args.pairs, "iters": args.iters, "step": args.step}
    if args.epochs is not None:
        if args.command == "train-fr":
            overrides["fr_epochs"] = args.epochs
        elif args.command == "train-morpher":
            overrides["morpher_epochs"] = args.epochs
        else:
            raise ValueError("--epochs applies to train-fr and train-morpher only")
    return config.override(**overrides)


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("WCMORPH_LOG", "INFO").upper(), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_ARGS
    try:
        config = _config(args)
        if args.command == "run":
            pipeline.run_all(config, args.out)
        else:
            pipeline.run_stage(args.command, config, args.out, role=args.role)
    except StageDependencyError as exc:
        print(f"wcmorph: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except FormatError as exc:
        print(f"wcmorph: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except ValueError as exc:
        print(f"wcmorph: {exc}", file=sys.stderr)
        return EXIT_ARGS
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
