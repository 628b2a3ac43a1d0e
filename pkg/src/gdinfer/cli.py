"""Command line entry point: ``gdinfer run|experiment|se|loocv --config PATH``."""

from __future__ import annotations

import argparse
import dataclasses
import sys

from . import experiments
from .gd import NonFiniteIterate
from .numerics import NumericsError
from .onsager import InferenceUnavailable
from .problem import InvalidConfig
from .state_evolution import CovarianceProjectionFailed

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

COMMANDS = {
    "run": experiments.cmd_run,
    "experiment": experiments.cmd_experiment,
    "se": experiments.cmd_se,
    "loocv": experiments.cmd_loocv,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gdinfer", description="Inference along gradient descent trajectories.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="key = value configuration file")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--strict", action="store_true", help="treat unavailable inference as a failure")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = experiments.load_config(args.config)
        overrides = {k: v for k, v in (("seed", args.seed), ("reps", args.reps), ("threads", args.threads))
                     if v is not None}
        if args.strict:
            overrides["strict"] = True
        cfg = dataclasses.replace(cfg, **overrides).validate()
    except InvalidConfig as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        out = COMMANDS[args.command](cfg, args.out)
    except InvalidConfig as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteIterate, InferenceUnavailable, CovarianceProjectionFailed, NumericsError,
            ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    for path in out if isinstance(out, tuple) else (out,):
        print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
