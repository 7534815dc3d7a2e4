"""Command-line entry point for multilevel stochastic collocation experiments.

Usage:
    mlsc run --preset paper-1d-n20 --method mlsc --eps 6.3e-4
    mlsc run --preset paper-2d-n10 --method slsc --grid-level 1
    mlsc plan --preset paper-1d-n20
    mlsc sweep --config experiments/sweep.toml --out results/sweep.csv
    mlsc reference --preset paper-1d-n20
    mlsc estimate-constants --preset paper-1d-n20
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import logfire
from pydantic import ValidationError

from . import experiments
from .allocation import MaxLevelsExceeded
from .fem import SolverError
from .problem import SampleEvaluationError
from .random_field import RootBracketError
from .schemas import EstimatorMethod, RoundingScheme

logger = logging.getLogger(__name__)

EXIT_FAILURE = 1
EXIT_CONFIG = 2

VERBS = ["run", "plan", "sweep", "reference", "estimate-constants"]


def banner(title: str) -> None:
    print("=" * 60)
    print(title)
    print("=" * 60)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mlsc",
        description="Multilevel stochastic collocation experiments",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__,
    )
    parser.add_argument("verb", choices=VERBS)
    parser.add_argument("--config", type=Path, help="TOML experiment configuration")
    parser.add_argument("--preset", choices=sorted(experiments.PRESETS), help="Built-in setup")
    parser.add_argument("--method", choices=[m.value for m in EstimatorMethod])
    parser.add_argument(
        "--eps", type=float, action="append", help="Relative accuracy target (repeatable)"
    )
    parser.add_argument("--scheme", choices=[s.value for s in RoundingScheme])
    parser.add_argument("--seed", type=int)
    parser.add_argument("--workers", type=int, help="Worker processes for PDE solves")
    parser.add_argument("--out", help="CSV output path (a .json report is written alongside)")
    parser.add_argument("--grid-level", type=int, help="Explicit sparse-grid level")
    parser.add_argument("--mesh-level", type=int, help="Explicit finest mesh level")
    parser.add_argument("--samples", type=int, help="Monte Carlo samples per level")
    parser.add_argument("--no-cache", action="store_true", help="Bypass the reference cache")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    return parser


def overrides_from(args: argparse.Namespace) -> dict:
    overrides = {
        "method": args.method,
        "eps": args.eps,
        "scheme": args.scheme,
        "seed": args.seed,
        "workers": args.workers,
        "out": args.out,
        "grid_level": args.grid_level,
        "mesh_level": args.mesh_level,
        "samples": args.samples,
        "cache": False if args.no_cache else None,
    }
    # explicit levels replace the configured targets
    if args.eps is None and (args.grid_level is not None or args.mesh_level is not None):
        overrides["eps"] = []
    return overrides


def print_rows(rows: list[dict]) -> None:
    for row in rows:
        rel = f"{row['rel_err']:.2e}" if row["rel_err"] is not None else "-"
        eps = f"{row['eps']:.2e}" if row["eps"] is not None else "-"
        print(
            f"  {row['method']:<13s} eps={eps:<9s} K={row['K']:<2d} grids={row['grids']:<12s} "
            f"value={row['value']:.10e} rel_err={rel} cost={row['model_cost']:.3e}"
        )


def dispatch(verb: str, config: experiments.ExperimentConfig) -> None:
    if verb == "plan":
        banner("ALLOCATION PLAN")
        for line in experiments.format_plan_rows(experiments.plan(config)):
            print(line)
        return

    if verb == "reference":
        banner("REFERENCE VALUE")
        value = experiments.reference(config)
        if value is None:
            raise ValueError("reference_h: the config names no reference")
        print(f"  h*: {config.reference_h}")
        print(f"  L*: {config.reference_level}")
        print(f"  value: {value:.15e}")
        return

    if verb == "estimate-constants":
        banner("RATE CONSTANTS")
        unset = config.model_copy(update={"constants": None})
        rc = experiments.constants(unset)
        for key, value in rc.model_dump().items():
            print(f"  {key:<12s} {value:.6g}")
        if config.eps:
            print()
            for row in experiments.cost_summary(rc, config.eps):
                print(
                    f"  eps={row['eps']:.2e} regime={row['regime']} "
                    f"ML eps^-{row['ml_exponent']:.3f} SL eps^-{row['sl_exponent']:.3f}"
                )
        return

    banner("SWEEP" if verb == "sweep" else f"RUN {config.method.value.upper()}")
    results = experiments.sweep(config) if verb == "sweep" else experiments.run(config)
    rows = [row for row, _ in results]
    print_rows(rows)
    path = experiments.write_rows(rows, config.out)
    experiments.write_reports([report for _, report in results], path.with_suffix(".json"))
    print(f"\nWrote {len(rows)} rows to {path}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if os.getenv("LOGFIRE_TOKEN"):
        logfire.configure()

    try:
        config = experiments.load_config(args.config, args.preset, overrides_from(args))
    except ValidationError as exc:
        for line in experiments.format_validation_error(exc):
            print(line, file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, OSError) as exc:
        print(f"config: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        dispatch(args.verb, config)
    except MaxLevelsExceeded as exc:
        logger.error("%s", exc)
        print(json.dumps(exc.history, indent=2), file=sys.stderr)
        return EXIT_FAILURE
    except (SampleEvaluationError, SolverError, RootBracketError, ValueError) as exc:
        logger.error("%s failed: %s", args.verb, exc)
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())
