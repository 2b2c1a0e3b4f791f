"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from . import runner
from .config import METHODS, ConfigError
from .core import ContractError, NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dime", description="Multi-objective policy optimization experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("sweep", "one policy per trade-off (dime, ls, mompo)"),
        ("conditioned", "one trade-off-conditioned policy (dime-multi)"),
        ("offline", "offline methods over the trade-off grid"),
        ("kickstart", "kickstarting learning curves"),
        ("eval-front", "hypervolume and coverage of an existing front CSV"),
        ("plot-data", "per-figure CSVs from results in --out"),
    ]:
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", required=True, type=Path, help="YAML experiment config")
        sp.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="run a single seed instead of the config's")
        sp.add_argument("--workers", type=int, default=1, help="worker processes")
        sp.add_argument("--method", choices=METHODS, default=None, help="override the config's method")
        if name == "eval-front":
            sp.add_argument("--front", type=Path, default=None, help="front CSV (default: OUT/front.csv)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = cfgmod.load(args.config)
        if args.seed is not None:
            cfg = cfg.replace(seeds=(args.seed,))
        if args.method is not None:
            cfg = cfg.replace(method=args.method)
            if args.command == "offline":
                cfg = cfg.replace(offline=dataclasses.replace(cfg.offline, methods=(args.method,)))
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        if args.command in runner.RUNNERS:
            result = runner.RUNNERS[args.command](cfg, args.out, args.workers)
            if isinstance(result, dict):
                print(json.dumps(result, indent=2, sort_keys=True))
            else:
                print(f"wrote {len(result)} rows to {args.out}")
        elif args.command == "eval-front":
            front = args.front or args.out / "front.csv"
            print(json.dumps(runner.eval_front(cfg, front, args.out), indent=2, sort_keys=True))
        else:
            for name in runner.plot_data(cfg, args.out):
                print(args.out / name)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ContractError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
