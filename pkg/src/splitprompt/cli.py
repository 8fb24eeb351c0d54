"""Command-line surface: run, validate, report.

Exit codes: 0 success, 1 configuration problem, 2 runtime infeasibility.
The default output directory comes from --out, then the config's
experiment.out, then $SPLITPROMPT_OUT, then ./results/<experiment id>.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .config import load_config
from .data import InfeasiblePartitionError
from .experiments import report, run_experiment
from .planner import InfeasibleClusterError
from .splitnet import InfeasibleChainError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INFEASIBLE = 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splitprompt")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run an experiment from a config file")
    run_p.add_argument("--config", required=True, help="path to the INI config")
    run_p.add_argument("--seed", type=int, default=None,
                       help="override the config's seed list with one seed")
    run_p.add_argument("--out", default=None, help="output directory")
    run_p.add_argument("--jobs", type=int, default=1,
                       help="seeds to run in parallel")

    val_p = sub.add_parser("validate", help="check a config file")
    val_p.add_argument("--config", required=True)

    rep_p = sub.add_parser("report", help="re-aggregate an existing rows.csv")
    rep_p.add_argument("--out", required=True, help="experiment output directory")
    return parser


def _out_dir(args, cfg) -> Path:
    if args.out:
        return Path(args.out)
    if cfg.out:
        return Path(cfg.out)
    base = os.environ.get("SPLITPROMPT_OUT", "results")
    return Path(base) / cfg.experiment_id.lower()


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)

    if args.command == "validate":
        diags = load_config(args.config)[1]
        for d in diags:
            print(d, file=sys.stderr)
        if diags:
            return EXIT_CONFIG
        print("ok")
        return EXIT_OK

    if args.command == "report":
        try:
            for path in report(args.out):
                print(path)
        except (FileNotFoundError, ValueError) as exc:
            print(exc, file=sys.stderr)
            return EXIT_CONFIG
        return EXIT_OK

    cfg, diags = load_config(args.config)
    if cfg is None or diags:
        for d in diags:
            print(d, file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None:
        cfg.seeds = (args.seed,)
    try:
        for path in run_experiment(cfg, _out_dir(args, cfg), jobs=args.jobs):
            print(path)
    except (InfeasibleClusterError, InfeasibleChainError,
            InfeasiblePartitionError) as exc:
        print(exc, file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
