"""Command-line entry points.

Exit codes: 0 success, 2 usage/config error, 3 numerical failure.
"""

import argparse
import json
import os
import sys

from .config import SystemConfig, load_config
from .errors import ConfigError, NumericError, SweepSpecError
from .harness import measure_complexity, run_experiment

USAGE_EXIT = 2
NUMERIC_EXIT = 3


def build_parser():
    parser = argparse.ArgumentParser(prog="ara",
                                     description="Asynchronous random-access receiver benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Monte Carlo experiment")
    run.add_argument("--config", help="flat key-value config file (defaults: desk profile)")
    run.add_argument("--algo", default="all", choices=["amp", "oamp", "fpamp", "all"])
    run.add_argument("--trials", type=int, default=100)
    run.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    run.add_argument("--sweep", default=None,
                     help="parameter sweep, e.g. tx_power=17,20,23,26 or theta=0.3,0.5,0.7")
    run.add_argument("--out", default="out", help="output directory")
    run.add_argument("--trace", action="store_true",
                     help="dump per-iteration receiver state of trial 0 (fpamp)")
    run.add_argument("--full-scale", action="store_true",
                     help="use the large benchmark dimensions")
    run.add_argument("--jobs", type=int, default=1, help="worker threads over trials")

    comp = sub.add_parser("complexity", help="instrumented multiply counts and timings")
    comp.add_argument("--config", help="config file (defaults: desk profile)")
    comp.add_argument("--iters", type=int, default=10)
    comp.add_argument("--full-scale", action="store_true")
    comp.add_argument("--out", default=None, help="write the JSON report here")
    return parser


def _load(args):
    config = load_config(args.config) if args.config else SystemConfig()
    if getattr(args, "seed", None) is not None:
        config = config.replace(seed=args.seed)
    return config


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USAGE_EXIT if exc.code not in (0, None) else 0
    try:
        config = _load(args)
        if args.command == "run":
            summary = run_experiment(config, args.algo, args.trials, args.out,
                                     sweep=args.sweep, jobs=args.jobs,
                                     trace=args.trace, full_scale=args.full_scale)
            print(f"wrote {os.path.join(args.out, 'summary.json')}")
            for point in summary.get("points") or [summary]:
                for algo, agg in point.get("aggregates", {}).items():
                    print(f"  {algo}: p_md={agg['p_md_mean']:.4g} "
                          f"p_fa={agg['p_fa_mean']:.4g} nmse={agg['nmse_db_mean']:.2f} dB")
        else:
            from .config import full_scale_profile
            if args.full_scale:
                config = full_scale_profile(config)
            report = measure_complexity(config, iters=args.iters)
            text = json.dumps(report, indent=2, default=float)
            if args.out:
                with open(args.out, "w", encoding="utf-8") as fh:
                    fh.write(text + "\n")
            print(text)
    except (ConfigError, SweepSpecError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except NumericError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return NUMERIC_EXIT
    return 0


if __name__ == "__main__":
    sys.exit(main())
