"""Command-line entry point.

    advpinn run <config-or-preset> [--profile desk|full] [--seed S] [--out DIR]
    advpinn sweep <config-or-preset> --param P --values v1,v2,...
    advpinn oracle build <problem>

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys

from . import harness, oracle, training


def _add_common(p):
    p.add_argument("config", help="config file path or preset name")
    p.add_argument("--profile", choices=harness.PROFILES, default="full",
                   help="desk divides all epoch counts by 10")
    p.add_argument("--out", default=None, help="output directory override")
    p.add_argument("--cache", default=None, help="oracle cache directory")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="advpinn",
        description="PINN training with adversarial collocation sampling",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config or preset")
    _add_common(p_run)
    p_run.add_argument("--seed", type=int, default=None,
                       help="run a single seed instead of the config's list")

    p_sweep = sub.add_parser("sweep", help="run a one-parameter sweep")
    _add_common(p_sweep)
    p_sweep.add_argument("--param", required=True,
                         choices=harness.SWEEP_PARAMS)
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated parameter values")

    p_oracle = sub.add_parser("oracle", help="oracle cache maintenance")
    o_sub = p_oracle.add_subparsers(dest="oracle_command", required=True)
    p_build = o_sub.add_parser("build", help="build a reference solution")
    p_build.add_argument("problem",
                         choices=["burgers", "multiscale", "allen_cahn"])
    p_build.add_argument("--cache", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            seeds = None if args.seed is None else [args.seed]
            harness.run_from_config(
                args.config, profile=args.profile, seeds=seeds,
                out=args.out, cache_dir=args.cache,
            )
            return 0
        if args.command == "sweep":
            values = [v for v in args.values.split(",") if v]
            path = harness.sweep(
                args.config, args.param, values, profile=args.profile,
                out=args.out, cache_dir=args.cache,
            )
            print(path)
            return 0
        if args.command == "oracle":
            if args.oracle_command == "build":
                if args.problem == "burgers":
                    oracle.burgers_reference_grid(cache_dir=args.cache)
                elif args.problem == "multiscale":
                    oracle.multiscale_reference(cache_dir=args.cache)
                else:
                    oracle.allen_cahn_reference(cache_dir=args.cache)
                return 0
        raise AssertionError("unreachable")
    except harness.ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (training.TrainingDiverged, FloatingPointError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
