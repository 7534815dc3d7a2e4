"""Estimators of E[psi(u)]: single-level and multilevel stochastic collocation,
plus Monte Carlo and multilevel Monte Carlo baselines.

Cost bookkeeping follows one metric for every method: a sample on mesh level k
costs C_k = C_c h_k**(-gamma). `total_model_cost` charges each of the M_{K-k}
collocation points of level k once (cancellations ignored), while
`solve_cost`/`total_solve_count` count the solves actually performed.
"""

import json
import logging
import math
import time
from dataclasses import dataclass

import logfire
import numpy as np
from sqlalchemy import select
from sqlalchemy.orm import sessionmaker

from .database import SessionLocal, init_db
from .models import ReferenceValue
from .problem import EllipticProblem, SampleModel, problem_hash
from .schemas import EstimateReport, EstimatorMethod, Functional, LevelContribution, LevelPlan
from .sparse_grid import Interpolant, SparseGridDesign, quadrature, sparse_grid_design

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CostModel:
    """C_k = C_c h_k**(-gamma); gamma defaults to the spatial dimension."""

    C_c: float = 1.0
    gamma: float | None = None

    def per_sample(self, model: SampleModel, k: int) -> float:
        gamma = model.spatial_dim if self.gamma is None else self.gamma
        return self.C_c * model.mesh_width(k) ** (-gamma)


def design_for(model: SampleModel, L: int) -> SparseGridDesign:
    weights = tuple(model.grid_weights) if model.grid_weights is not None else None
    return sparse_grid_design(model.grid_kind, model.parameter_dimension, L, weights)


def mesh_level_of(model: SampleModel, h: float) -> int:
    k = round(math.log(model.h0 / h, model.eta))
    if k < 0 or not math.isclose(model.mesh_width(k), h, rel_tol=1e-9):
        raise ValueError(f"h={h} is not a mesh width of the hierarchy")
    return k


# =============================================================================
# STOCHASTIC COLLOCATION
# =============================================================================


def slsc_estimate(
    model: SampleModel, k: int, L: int, psi: Functional, cost: CostModel = CostModel()
) -> EstimateReport:
    """Q_L[psi(u_{h_k})] on the sparse grid of level L."""
    start = time.perf_counter()
    with logfire.span("slsc estimate level={k} L={L}", k=k, L=L):
        design = design_for(model, L)
        value = quadrature(design, model.functional_samples(design.points, k, psi))
    points = design.point_count
    charge = points * cost.per_sample(model, k)
    return EstimateReport(
        method=EstimatorMethod.SLSC,
        value=value,
        per_level=[
            LevelContribution(
                k=k, grid_level=L, points=points, contribution=value, model_cost=charge,
                solves=points,
            )
        ],
        total_model_cost=charge,
        total_solve_count=points,
        solve_cost=charge,
        wall_time=time.perf_counter() - start,
    )


def cancellation_groups(grid_levels: list[int]) -> list[tuple[int, int]]:
    """Maximal runs (a, b) of consecutive mesh levels sharing one grid level."""
    groups, a = [], 0
    for k in range(1, len(grid_levels) + 1):
        if k == len(grid_levels) or grid_levels[k] != grid_levels[a]:
            groups.append((a, k - 1))
            a = k
    return groups


def mlsc_estimate(
    model: SampleModel,
    plan: LevelPlan,
    psi: Functional,
    *,
    group_cancellations: bool = True,
    cost: CostModel = CostModel(),
) -> EstimateReport:
    """sum_k Q_{L_{K-k}}[psi(u_{h_k}) - psi(u_{h_{k-1}})] with u_{h_{-1}} = 0.

    Consecutive levels on the same grid telescope inside one quadrature, so a
    run a..b is evaluated as Q[psi(u_{h_b}) - psi(u_{h_{a-1}})] and the interior
    solves are skipped. The grouped value is reported on level b.
    """
    levels = list(plan.grid_levels)
    if any(levels[k + 1] > levels[k] for k in range(len(levels) - 1)):
        raise ValueError("grid_levels must be non-increasing in k")
    if group_cancellations:
        groups = cancellation_groups(levels)
    else:
        groups = [(k, k) for k in range(plan.K + 1)]

    start = time.perf_counter()
    per_level: list[LevelContribution] = []
    solve_cost, solve_count, value = 0.0, 0, 0.0
    with logfire.span("mlsc estimate K={K}", K=plan.K, grid_levels=levels):
        for a, b in groups:
            design = design_for(model, levels[a])
            points = design.point_count
            samples = model.functional_samples(design.points, b, psi)
            solves, charge = points, points * cost.per_sample(model, b)
            if a > 0:
                samples = samples - model.functional_samples(design.points, a - 1, psi)
                solves += points
                charge += points * cost.per_sample(model, a - 1)
            contribution = quadrature(design, samples)
            value += contribution
            solve_cost += charge
            solve_count += solves
            for k in range(a, b + 1):
                per_level.append(
                    LevelContribution(
                        k=k,
                        grid_level=levels[k],
                        points=points,
                        contribution=contribution if k == b else 0.0,
                        model_cost=points * cost.per_sample(model, k),
                        solves=solves if k == b else 0,
                        grouped_into=b if (k != b) else None,
                    )
                )
            logger.debug("levels %d..%d on grid %d: %.6e", a, b, levels[a], contribution)

    return EstimateReport(
        method=EstimatorMethod.MLSC,
        value=value,
        per_level=per_level,
        total_model_cost=sum(entry.model_cost for entry in per_level),
        total_solve_count=solve_count,
        solve_cost=solve_cost,
        wall_time=time.perf_counter() - start,
    )


def build_surrogate(problem: EllipticProblem, k: int, L: int) -> Interpolant:
    """Field-valued interpolant y -> nodal values of u_{h_k}(y)."""
    design = design_for(problem, L)
    return Interpolant(design=design, values=problem.solve_samples(design.points, k))


# =============================================================================
# MONTE CARLO BASELINES
# =============================================================================


def parameter_stream(seed: int, level: int, count: int, N: int) -> np.ndarray:
    """Uniform draws on [-1, 1]^N from a counter-based stream keyed by (seed, level).

    Row i is always the same for a given (seed, level), whatever `count` is.
    """
    generator = np.random.Generator(np.random.Philox(key=[seed, level]))
    return 2.0 * generator.random((count, N)) - 1.0


def mc_estimate(
    model: SampleModel,
    k: int,
    M: int,
    seed: int,
    psi: Functional,
    cost: CostModel = CostModel(),
) -> EstimateReport:
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    start = time.perf_counter()
    with logfire.span("mc estimate level={k} M={M}", k=k, M=M):
        samples = model.functional_samples(
            parameter_stream(seed, k, M, model.parameter_dimension), k, psi
        )
    value = float(samples.mean())
    charge = M * cost.per_sample(model, k)
    return EstimateReport(
        method=EstimatorMethod.MC,
        value=value,
        per_level=[
            LevelContribution(
                k=k, points=M, contribution=value, model_cost=charge, solves=M,
                variance=float(samples.var(ddof=1)) if M > 1 else 0.0,
            )
        ],
        total_model_cost=charge,
        total_solve_count=M,
        solve_cost=charge,
        wall_time=time.perf_counter() - start,
        seed=seed,
    )


def _level_differences(
    model: SampleModel, k: int, count: int, seed: int, psi: Functional
) -> np.ndarray:
    Y = parameter_stream(seed, k, count, model.parameter_dimension)
    fine = model.functional_samples(Y, k, psi)
    return fine if k == 0 else fine - model.functional_samples(Y, k - 1, psi)


def mlmc_estimate(
    model: SampleModel,
    K: int,
    psi: Functional,
    seed: int,
    *,
    samples: list[int] | None = None,
    eps: float | None = None,
    pilot: int = 20,
    cost: CostModel = CostModel(),
) -> EstimateReport:
    """Telescoping Monte Carlo with independent streams per level.

    With `eps`, M_k = ceil(2 eps**-2 sqrt(V_k / C_k) sum_j sqrt(V_j C_j)) from
    pilot variances V_k, and never fewer than the pilot size.
    """
    if samples is None and eps is None:
        raise ValueError("give per-level samples or a target eps")
    costs = [cost.per_sample(model, k) for k in range(K + 1)]
    if samples is None:
        if pilot < 2:
            raise ValueError("pilot variance estimation needs at least 2 samples")
        variances = [
            float(_level_differences(model, k, pilot, seed, psi).var(ddof=1))
            for k in range(K + 1)
        ]
        total = sum(math.sqrt(v * c) for v, c in zip(variances, costs))
        samples = [
            max(pilot, math.ceil(2.0 / eps**2 * math.sqrt(v / c) * total))
            for v, c in zip(variances, costs)
        ]
    if len(samples) != K + 1 or any(m < 1 for m in samples):
        raise ValueError("samples needs K + 1 positive entries")

    start = time.perf_counter()
    per_level, value = [], 0.0
    with logfire.span("mlmc estimate K={K}", K=K, samples=samples):
        for k, count in enumerate(samples):
            diffs = _level_differences(model, k, count, seed, psi)
            mean = float(diffs.mean())
            value += mean
            solves = count if k == 0 else 2 * count
            per_level.append(
                LevelContribution(
                    k=k,
                    points=count,
                    contribution=mean,
                    model_cost=count * costs[k],
                    solves=solves,
                    variance=float(diffs.var(ddof=1)) if count > 1 else 0.0,
                )
            )
    solve_cost = sum(
        entry.points * (costs[entry.k] + (costs[entry.k - 1] if entry.k > 0 else 0.0))
        for entry in per_level
    )
    return EstimateReport(
        method=EstimatorMethod.MLMC,
        value=value,
        per_level=per_level,
        total_model_cost=sum(entry.model_cost for entry in per_level),
        total_solve_count=sum(entry.solves for entry in per_level),
        solve_cost=solve_cost,
        wall_time=time.perf_counter() - start,
        seed=seed,
    )


# =============================================================================
# REFERENCE VALUES AND ERROR SPLITS
# =============================================================================


def reference_key(
    model: SampleModel, h_star: float, L_star: int, psi: Functional
) -> tuple[str, str]:
    description = {
        "problem": model.describe(),
        "functional": psi.model_dump(mode="json"),
        "h_star": h_star,
        "L_star": L_star,
    }
    return problem_hash(description), json.dumps(description, sort_keys=True, default=str)


def reference_value(
    model: SampleModel,
    h_star: float,
    L_star: int,
    psi: Functional,
    *,
    session_factory: sessionmaker | None = SessionLocal,
) -> float:
    """Overkill value Q_{L*}[psi(u_{h*})], read through the SQL cache when one is given."""
    key, description = reference_key(model, h_star, L_star, psi)
    k_star = mesh_level_of(model, h_star)
    if session_factory is not None:
        with session_factory() as session:
            init_db(session.get_bind())
            row = session.scalar(select(ReferenceValue).where(ReferenceValue.problem_hash == key))
            if row is not None:
                logger.info("reference %s read from cache", key[:12])
                return row.value

    with logfire.span("reference value h*={h_star} L*={L_star}", h_star=h_star, L_star=L_star):
        report = slsc_estimate(model, k_star, L_star, psi)
    logger.info("reference %s computed in %.1fs: %.12e", key[:12], report.wall_time, report.value)

    if session_factory is not None:
        with session_factory() as session:
            session.add(
                ReferenceValue(
                    problem_hash=key,
                    description=description,
                    mesh_width=h_star,
                    grid_level=L_star,
                    points=report.per_level[0].points,
                    value=report.value,
                    wall_time=report.wall_time,
                )
            )
            session.commit()
    return report.value


def error_split(
    model: SampleModel,
    K: int,
    L_star: int,
    estimate: float,
    reference: float,
    psi: Functional,
    *,
    relative: bool = True,
) -> tuple[float, float]:
    """(interpolation error, spatial error) of an estimate on finest level K.

    Interpolation: |Q_{L*} psi(u_{h_K}) - estimate|. Spatial:
    |reference - Q_{L*} psi(u_{h_K})|. Both relative to |reference| by default.
    """
    converged = slsc_estimate(model, K, L_star, psi).value
    scale = abs(reference) if relative and reference != 0 else 1.0
    return abs(converged - estimate) / scale, abs(reference - converged) / scale
