#!/usr/bin/env python3
"""Reproduce the allocation table, the adaptive-driver table and the cost sweeps.

This script chains the `mlsc` verbs in-process:
1. Print formula / up / up-down sample counts for the 1D preset (no solves)
2. Compute (or read from the cache) the overkill reference values
3. Run the adaptive driver for every 1D target
4. Sweep SLSC and the formula / rounded / best MLSC allocations for both presets

Usage:
    # Everything (1D and 2D; the 2D reference takes several minutes)
    uv run python scripts/experiments/reproduce_tables.py

    # Only the instantaneous allocation table
    uv run python scripts/experiments/reproduce_tables.py --plan-only

    # Skip the 2D preset
    uv run python scripts/experiments/reproduce_tables.py --skip-2d --workers 4
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[2]))

from src.main import banner  # noqa: E402
from src.main import main as mlsc  # noqa: E402


def build_steps(args: argparse.Namespace) -> list[tuple[str, list[str]]]:
    """(title, mlsc argv) for every table requested by the flags."""
    steps = [("Allocation table, 1D", ["plan", "--preset", "paper-1d-n20"])]
    if args.plan_only:
        return steps

    workers = ["--workers", str(args.workers)]
    presets = [("1d", "paper-1d-n20")]
    if not args.skip_2d:
        presets.append(("2d", "paper-2d-n10"))

    for tag, preset in presets:
        steps.append((f"Reference value, {tag.upper()}", ["reference", "--preset", preset]))
    steps.append(
        (
            "Adaptive driver, 1D",
            ["run", "--preset", "paper-1d-n20", "--method", "adaptive"]
            + ["--out", str(args.out_dir / "adaptive_1d.csv")]
            + workers,
        )
    )
    for tag, preset in presets:
        steps.append(
            (
                f"Cost sweep, {tag.upper()}",
                ["sweep", "--preset", preset, "--out", str(args.out_dir / f"sweep_{tag}.csv")]
                + workers,
            )
        )
    return steps


def main():
    parser = argparse.ArgumentParser(
        description="Reproduce the multilevel collocation tables",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__,
    )
    parser.add_argument("--plan-only", action="store_true", help="Only print allocation tables")
    parser.add_argument("--skip-2d", action="store_true", help="Skip the 2D preset")
    parser.add_argument("--workers", type=int, default=1, help="Worker processes for PDE solves")
    parser.add_argument("--out-dir", type=Path, default=Path("results"), help="Output directory")
    args = parser.parse_args()

    steps = build_steps(args)
    banner(f"MLSC TABLE REPRODUCTION ({len(steps)} steps)")
    timings = []
    for number, (title, argv) in enumerate(steps, start=1):
        print()
        print(f"[{number}/{len(steps)}] {title}: mlsc {' '.join(argv)}")
        start = time.perf_counter()
        status = mlsc(argv)
        timings.append((title, time.perf_counter() - start))
        if status != 0:
            print(f"\nStopped at '{title}' (exit status {status})")
            sys.exit(status)

    print()
    banner("REPRODUCTION COMPLETE")
    for title, seconds in timings:
        print(f"  {title:<28s} {seconds:8.1f} s")
    print(f"\nCSV files and JSON reports are in {args.out_dir}/")


if __name__ == "__main__":
    main()
