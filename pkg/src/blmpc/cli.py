"""Command-line entry point: ``blmpc plan|run|oracle --config PATH --out DIR`` and ``blmpc validate``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 validation failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench
from .config import load_config
from .errors import ConfigError, NotPositiveDefinite, RolloutDivergence
from .oracles import BoundaryMassError
from .validation import SUITES, run_suites

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_VALIDATION = 0, 2, 3, 4

NUMERICAL_ERRORS = (NotPositiveDefinite, np.linalg.LinAlgError, RolloutDivergence, FloatingPointError, BoundaryMassError)

COMMANDS = {"plan": bench.cmd_plan, "run": bench.cmd_run, "oracle": bench.cmd_oracle}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blmpc", description="Bayesian-learning MPC benchmarks")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("plan", "plan one round from the initial state"),
        ("run", "run the closed loop and write a run record"),
        ("oracle", "write reference solutions for the configured cost"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, type=Path, help="YAML config or run_record.json")
        p.add_argument("--out", required=True, type=Path, help="output directory")
    v = sub.add_parser("validate", help="run the property suites")
    v.add_argument("--suite", action="append", choices=sorted(SUITES), help="suite to run (repeatable; default all)")
    v.add_argument("--seed", type=int, default=0)
    return parser


def _validate(args: argparse.Namespace) -> int:
    checks, timing = run_suites(args.suite, seed=args.seed)
    for check in checks:
        print(check.line())
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed in {sum(timing.values()):.1f} s")
    return EXIT_VALIDATION if failed else EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "validate":
        return _validate(args)
    try:
        setup = load_config(args.config)
        result = COMMANDS[args.command](setup, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    for name in result.files:
        print(args.out / name)
    if result.failed:
        print("numerical failure: execution diverged; partial results written", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
