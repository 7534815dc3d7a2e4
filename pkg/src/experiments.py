"""Experiment runner: presets, config loading and the run/plan/sweep/reference verbs.

Every accuracy target eps is relative to |E[psi(u)]|. Rows written to CSV share
one fixed header (CSV_COLUMNS); a `<name>.schema.json` sidecar records it with
CSV_SCHEMA_VERSION.
"""

import csv
import json
import logging
import math
import tomllib
from pathlib import Path
from typing import Any

import logfire
from pydantic import ValidationError

from .allocation import (
    adaptive_driver,
    choose_K,
    estimate_constants,
    grid_cardinalities,
    make_plan,
    pilot_magnitude,
    plan_rows,
    single_level_plan,
    theoretical_cost,
)
from .database import SessionLocal
from .estimators import (
    CostModel,
    design_for,
    error_split,
    mc_estimate,
    mlmc_estimate,
    mlsc_estimate,
    parameter_stream,
    reference_value,
    slsc_estimate,
)
from .problem import EllipticProblem, default_workers
from .random_field import CoefficientField, ConstantCoefficient, kl_expansion
from .schemas import (
    EstimateReport,
    EstimatorMethod,
    ExperimentConfig,
    LevelPlan,
    RateConstants,
    RoundingScheme,
)
from .sparse_grid import design_to_json

logger = logging.getLogger(__name__)

CSV_SCHEMA_VERSION = 1
CSV_COLUMNS = [
    "method",
    "eps",
    "K",
    "grids",
    "value",
    "rel_err",
    "interp_err",
    "spatial_err",
    "model_cost",
    "solve_cost",
    "wall_s",
    "seed",
]

MC_PILOT = 20


# =============================================================================
# PRESETS
# =============================================================================

PRESETS: dict[str, dict[str, Any]] = {
    # 1D, 20 KL terms, point value at x* = 3/4 (a node of every mesh from h0 = 1/4 on)
    "paper-1d-n20": {
        "spatial_dim": 1,
        "N": 20,
        "h0": 0.25,
        "functional": {"kind": "point", "x": [0.75]},
        "eps": [6.3e-4, 7.9e-5, 1.4e-5, 4.7e-6],
        "reference_h": 1 / 1024,
        "reference_level": 4,
        "constants": {
            "alpha": 2.1,
            "C_s": 1.5e-3,
            "beta": 2.1,
            "mu": 0.8,
            "C": 0.01,
            "gamma": 1.0,
            "eta": 2.0,
            "h0": 0.25,
        },
    },
    # 2D, 10 KL terms, average over the hat-function support of the centre node
    "paper-2d-n10": {
        "spatial_dim": 2,
        "N": 10,
        "h0": 0.25,
        "functional": {"kind": "local_average", "node": [0.5, 0.5], "reference_width": 1 / 256},
        "eps": [1e-2, 3e-3, 1e-3, 3e-4],
        "reference_h": 1 / 128,
        "reference_level": 4,
        "constants": {
            "alpha": 2.0,
            "C_s": 0.05,
            "beta": 2.0,
            "mu": 1.4,
            "C": 0.05,
            "gamma": 2.0,
            "eta": 2.0,
            "h0": 0.25,
        },
    },
}


def load_config(
    path: str | Path | None = None,
    preset: str | None = None,
    overrides: dict[str, Any] | None = None,
) -> ExperimentConfig:
    """Preset values, then the TOML file, then `overrides` (None entries are skipped)."""
    data: dict[str, Any] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r} (known: {', '.join(PRESETS)})")
        data.update(PRESETS[preset])
    if path is not None:
        with open(path, "rb") as f:
            data.update(tomllib.load(f))
    data.update({key: value for key, value in (overrides or {}).items() if value is not None})
    return ExperimentConfig.model_validate(data)


def format_validation_error(exc: ValidationError) -> list[str]:
    """`key: message` lines naming the offending config keys."""
    lines = []
    for error in exc.errors():
        key = ".".join(str(part) for part in error["loc"]) or "config"
        lines.append(f"{key}: {error['msg']}")
    return lines


def build_problem(config: ExperimentConfig) -> EllipticProblem:
    if config.coefficient == "constant":
        coefficient = ConstantCoefficient(
            config.constant_value, spatial_dim=config.spatial_dim, parameter_dimension=config.N
        )
    else:
        coefficient = CoefficientField(
            kl_expansion(config.spatial_dim, config.N), base_shift=config.base_shift
        )
    return EllipticProblem(
        coefficient=coefficient,
        h0=config.h0,
        eta=config.eta,
        grid_kind=config.grid_kind,
        grid_weights=tuple(config.grid_weights) if config.grid_weights else None,
        workers=config.workers or default_workers(),
    )


def grid_sizes_for(config: ExperimentConfig) -> list[int]:
    return grid_cardinalities(
        config.grid_kind, config.N, config.max_grid_level, config.grid_weights
    )


def cost_model(config: ExperimentConfig) -> CostModel:
    if config.constants is None:
        return CostModel()
    return CostModel(C_c=config.constants.C_c, gamma=config.constants.gamma)


# =============================================================================
# VERBS
# =============================================================================


def reference(config: ExperimentConfig, problem: EllipticProblem | None = None) -> float | None:
    """Cached overkill value, or None when the config names no reference."""
    if config.reference_h is None or config.reference_level is None:
        return None
    problem = problem or build_problem(config)
    return reference_value(
        problem,
        config.reference_h,
        config.reference_level,
        config.functional,
        session_factory=SessionLocal if config.cache else None,
    )


def constants(config: ExperimentConfig, problem: EllipticProblem | None = None) -> RateConstants:
    """Configured constants, or pilot estimates when the config has none."""
    if config.constants is not None:
        return config.constants
    problem = problem or build_problem(config)
    return estimate_constants(problem, config.functional, cost=cost_model(config))


def scaled_constants(config: ExperimentConfig, problem: EllipticProblem) -> RateConstants:
    """Constants carrying the pilot magnitude, so relative tolerances convert to absolute ones.

    Configured constants are relative; they get value_scale from one level-1 pilot.
    """
    rc = constants(config, problem)
    if config.constants is not None and rc.value_scale == 1.0:
        rc = rc.model_copy(update={"value_scale": pilot_magnitude(problem, config.functional)})
    return rc


def plan(config: ExperimentConfig) -> list[dict]:
    """Formula, up and up/down rows per eps. No PDE solves when constants are configured."""
    rc = constants(config)
    sizes = grid_sizes_for(config)
    rows = []
    for eps in config.eps:
        rows.extend(plan_rows(eps, rc, sizes))
    return rows


def format_plan_rows(rows: list[dict]) -> list[str]:
    lines = []
    for row in rows:
        counts = " ".join(f"{count:>8d}" for count in row["counts"])
        lines.append(f"eps={row['eps']:<9.2g} K={row['K']:<2d} {row['scheme']:<8s} {counts}")
    return lines


def _row(report: EstimateReport, eps: float | None, K: int, grids: list[int | None]) -> dict:
    return {
        "method": report.method.value,
        "eps": eps,
        "K": K,
        "grids": "/".join("-" if level is None else str(level) for level in grids),
        "value": report.value,
        "rel_err": report.relative_error,
        "interp_err": report.interp_error,
        "spatial_err": report.spatial_error,
        "model_cost": report.total_model_cost,
        "solve_cost": report.solve_cost,
        "wall_s": report.wall_time,
        "seed": report.seed,
    }


def _need(value, what: str):
    if value is None:
        raise ValueError(f"{what}: required by this method unless levels are given explicitly")
    return value


def _mlsc_plan(config: ExperimentConfig, eps: float | None, rc: RateConstants | None) -> LevelPlan:
    if config.mesh_level is not None and config.grid_level is not None:
        # every level on one grid, which telescopes to a single-level estimate
        levels = [config.grid_level] * (config.mesh_level + 1)
        return LevelPlan(
            K=config.mesh_level,
            grid_levels=levels,
            sample_counts=[grid_sizes_for(config)[config.grid_level]] * len(levels),
            rounding=config.scheme,
            constants=rc,
        )
    sizes = grid_sizes_for(config)
    return make_plan(_need(eps, "eps"), _need(rc, "constants"), sizes, config.scheme)


def _mc_samples(
    config: ExperimentConfig, problem: EllipticProblem, k: int, eps: float, scale: float
) -> int:
    """M = 2 V / (eps scale)**2 from a pilot variance, so the sampling error stays below eps/2."""
    Y = parameter_stream(config.seed, k, MC_PILOT, problem.parameter_dimension)
    variance = float(problem.functional_samples(Y, k, config.functional).var(ddof=1))
    return max(MC_PILOT, math.ceil(2.0 * variance / (eps * scale) ** 2))


def run_method(
    config: ExperimentConfig,
    problem: EllipticProblem,
    method: EstimatorMethod,
    eps: float | None,
    *,
    rc: RateConstants | None = None,
    ref: float | None = None,
) -> tuple[dict, EstimateReport]:
    """One estimate, returned as a CSV row and the full report."""
    psi, cost = config.functional, cost_model(config)
    scale = rc.value_scale if rc is not None else 1.0
    with logfire.span("run {method} eps={eps}", method=method.value, eps=eps):
        if method == EstimatorMethod.SLSC:
            if config.grid_level is not None:
                K = config.mesh_level if config.mesh_level is not None else 0
                L = config.grid_level
            else:
                K, L, _ = single_level_plan(
                    _need(eps, "eps"), _need(rc, "constants"), grid_sizes_for(config)
                )
            report = slsc_estimate(problem, K, L, psi, cost)
            grids: list[int | None] = [L]
        elif method == EstimatorMethod.MLSC:
            level_plan = _mlsc_plan(config, eps, rc)
            report = mlsc_estimate(problem, level_plan, psi, cost=cost)
            K, grids = level_plan.K, list(level_plan.grid_levels)
        elif method == EstimatorMethod.ADAPTIVE:
            level_plan, report = adaptive_driver(
                problem,
                psi,
                _need(eps, "eps"),
                config.scheme,
                constants=rc,
                max_levels=config.max_levels,
                max_grid_level=config.max_grid_level,
                cost=cost,
            )
            report = report.model_copy(update={"method": EstimatorMethod.ADAPTIVE})
            K, grids = level_plan.K, list(level_plan.grid_levels)
        elif method == EstimatorMethod.MC:
            K = config.mesh_level
            if K is None:
                K = choose_K(_need(eps, "eps"), _need(rc, "constants"))
            M = config.samples or _mc_samples(config, problem, K, _need(eps, "eps"), scale)
            report = mc_estimate(problem, K, M, config.seed, psi, cost)
            grids = [None]
        else:
            K = config.mesh_level
            if K is None:
                K = choose_K(_need(eps, "eps"), _need(rc, "constants"))
            report = mlmc_estimate(
                problem,
                K,
                psi,
                config.seed,
                samples=[config.samples] * (K + 1) if config.samples else None,
                eps=None if config.samples else _need(eps, "eps") * scale,
                cost=cost,
            )
            grids = [None] * (K + 1)

    if ref is not None:
        report = report.with_reference(ref)
        if method in (EstimatorMethod.SLSC, EstimatorMethod.MLSC, EstimatorMethod.ADAPTIVE):
            interp, spatial = error_split(
                problem, K, config.reference_level, report.value, ref, psi
            )
            report = report.model_copy(update={"interp_error": interp, "spatial_error": spatial})
    report = report.model_copy(update={"seed": config.seed})
    logger.info(
        "%s eps=%s K=%d value=%.10e rel_err=%s",
        method.value,
        eps,
        K,
        report.value,
        f"{report.relative_error:.3e}" if report.relative_error is not None else "-",
    )
    return _row(report, eps, K, grids), report


def run(
    config: ExperimentConfig, methods: list[EstimatorMethod] | None = None
) -> list[tuple[dict, EstimateReport]]:
    """Run `config.method` (or each of `methods`) for every eps; explicit levels run once."""
    methods = methods or [config.method]
    problem = build_problem(config)
    ref = reference(config, problem)
    needs_constants = bool(config.eps) or EstimatorMethod.ADAPTIVE in methods
    rc = scaled_constants(config, problem) if needs_constants else config.constants
    targets: list[float | None] = list(config.eps) or [None]
    return [
        run_method(config, problem, method, eps, rc=rc, ref=ref)
        for method in methods
        for eps in targets
    ]


SWEEP_VARIANTS: dict[str, RoundingScheme] = {
    "formula": RoundingScheme.UP,
    "rounded": RoundingScheme.UPDOWN,
    "best": RoundingScheme.BEST,
}


def sweep(config: ExperimentConfig) -> list[tuple[dict, EstimateReport]]:
    """Cost-versus-error rows for every method in `sweep_methods` and every eps.

    MLSC runs once per allocation in SWEEP_VARIANTS, labelled `mlsc-<variant>`.
    """
    if not config.eps:
        raise ValueError("eps: a sweep needs at least one target")
    if config.reference_h is None or config.reference_level is None:
        raise ValueError("reference_h: a sweep needs a reference")
    formula = config.model_copy(update={"grid_level": None, "mesh_level": None, "samples": None})
    problem = build_problem(formula)
    ref = reference(formula, problem)
    rc = scaled_constants(formula, problem)
    results = []
    for method in formula.sweep_methods:
        if method != EstimatorMethod.MLSC:
            for eps in formula.eps:
                results.append(run_method(formula, problem, method, eps, rc=rc, ref=ref))
            continue
        for variant, scheme in SWEEP_VARIANTS.items():
            allocation = formula.model_copy(update={"scheme": scheme})
            for eps in formula.eps:
                row, report = run_method(allocation, problem, method, eps, rc=rc, ref=ref)
                results.append(({**row, "method": f"mlsc-{variant}"}, report))
    return results


def cost_summary(rc: RateConstants, eps_values: list[float]) -> list[dict]:
    """Predicted multilevel and single-level epsilon-cost per target."""
    return [
        {"eps": eps, **theoretical_cost(eps, rc).model_dump(mode="json")} for eps in eps_values
    ]


# =============================================================================
# OUTPUT
# =============================================================================


def write_rows(rows: list[dict], path: str | Path) -> Path:
    """CSV with the fixed header plus a `.schema.json` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({key: "" if row.get(key) is None else row[key] for key in CSV_COLUMNS})
    schema = path.with_suffix(".schema.json")
    schema.write_text(json.dumps({"version": CSV_SCHEMA_VERSION, "columns": CSV_COLUMNS}))
    logger.info("wrote %d rows to %s", len(rows), path)
    return path


def read_rows(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def write_reports(reports: list[EstimateReport], path: str | Path) -> Path:
    """All reports of a run as one JSON array."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps([report.model_dump(mode="json") for report in reports], indent=2)
    )
    return path


def write_design(config: ExperimentConfig, L: int, path: str | Path) -> Path:
    """Sparse-grid design of level L as versioned JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(design_to_json(design_for(build_problem(config), L)))
    return path


def write_expansion(config: ExperimentConfig, path: str | Path) -> Path:
    """KL eigenpairs of the configured field, for reproducibility snapshots."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    expansion = kl_expansion(config.spatial_dim, config.N)
    path.write_text(json.dumps(expansion.to_json_dict(), indent=2))
    return path
