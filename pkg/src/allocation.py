"""Level and sample selection for multilevel collocation.

Constants are expressed per level index: the spatial error on level k is
about C_s eta**(-alpha k) and the interpolation error of the level-k
difference on M points about C eta**(-beta k) M**(-mu). When the constants
come from estimate_constants with relative=True they are also divided by
value_scale, so every eps is then a relative accuracy.
"""

import bisect
import itertools
import logging
import math
from collections.abc import Sequence

import logfire
import numpy as np

from .estimators import CostModel, design_for, mlsc_estimate
from .problem import SampleModel
from .schemas import (
    CostPrediction,
    CostRegime,
    EstimateReport,
    Functional,
    GridKind,
    LevelPlan,
    RateConstants,
    RoundingScheme,
)
from .sparse_grid import build_index_set, point_count, quadrature, smolyak_point_count

logger = logging.getLogger(__name__)

DEFAULT_MAX_LEVELS = 10


class MaxLevelsExceeded(RuntimeError):
    """The adaptive driver hit its level guard; `history` holds one dict per iteration."""

    def __init__(self, history: list[dict]):
        last = history[-1] if history else {}
        super().__init__(
            f"no convergence after {len(history)} levels "
            f"(last difference {last.get('difference', float('nan')):.3e})"
        )
        self.history = history


# =============================================================================
# FORMULAS
# =============================================================================


def choose_K(eps: float, rc: RateConstants) -> int:
    """K = ceil(log_eta(2 C_s / eps) / alpha), at least 0."""
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    raw = math.log(2.0 * rc.C_s / eps, rc.eta) / rc.alpha
    if abs(raw - round(raw)) < 1e-9:
        raw = round(raw)
    return max(0, math.ceil(raw))


def optimal_sample_sizes(eps: float, K: int, rc: RateConstants) -> np.ndarray:
    """Unrounded M_{K-k}, k = 0..K (largest on the coarsest mesh)."""
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if K < 0:
        raise ValueError(f"K must be >= 0, got {K}")
    if not rc.mu > 0:
        raise ValueError(f"mu must be positive, got {rc.mu}")
    k = np.arange(K + 1)
    log_eta = math.log(rc.eta)
    S = float(np.sum(np.exp(-k * (rc.beta - rc.gamma * rc.mu) / (rc.mu + 1) * log_eta)))
    log_counts = (
        (math.log(2.0 * rc.C * S) - math.log(eps)) / rc.mu
        - k * (rc.beta + rc.gamma) / (rc.mu + 1) * log_eta
    )
    if np.any(log_counts > 700):
        raise OverflowError(f"sample counts overflow for eps={eps}, K={K}")
    return np.exp(log_counts)


def sample_counts(eps: float, K: int, rc: RateConstants) -> list[int]:
    return [math.ceil(count) for count in optimal_sample_sizes(eps, K, rc)]


def level_cost(rc: RateConstants, k: int) -> float:
    return rc.C_c * (rc.h0 * rc.eta ** (-k)) ** (-rc.gamma)


# =============================================================================
# ROUNDING TO REALIZABLE GRIDS
# =============================================================================


def grid_cardinalities(
    kind: GridKind, N: int, max_level: int, weights: Sequence[float] | None = None
) -> list[int]:
    """Design sizes for grid levels 0..max_level."""
    if kind == GridKind.SMOLYAK:
        return [smolyak_point_count(N, L) for L in range(max_level + 1)]
    return [point_count(build_index_set(kind, N, L, weights)) for L in range(max_level + 1)]


def _up_index(sizes: Sequence[int], count: int) -> int:
    return bisect.bisect_left(sizes, count)


def round_to_grid(
    counts: Sequence[int], grid_sizes: Sequence[int], scheme: RoundingScheme
) -> tuple[list[int], list[int]]:
    """Map sample counts to (rounded counts, grid levels).

    The ceiling scheme keeps the counts; its grid levels are those of the
    smallest grid holding each count.
    """
    sizes = list(grid_sizes)
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("grid_sizes must be strictly increasing")
    counts = [int(math.ceil(c)) for c in counts]
    if any(c < 1 for c in counts):
        raise ValueError("counts must be positive")
    if max(counts) > sizes[-1]:
        raise ValueError(f"count {max(counts)} exceeds the largest grid ({sizes[-1]})")

    if scheme == RoundingScheme.BEST:
        raise ValueError("best plans come from best_grid_levels, not from rounding counts")
    up = [_up_index(sizes, c) for c in counts]
    if scheme == RoundingScheme.CEIL:
        return counts, up
    if scheme == RoundingScheme.UP:
        return [sizes[i] for i in up], up

    chosen, moves = [], []
    for count, i in zip(counts, up):
        if sizes[i] == count or i == 0:
            chosen.append(i)
        else:
            down_move = math.log(count / sizes[i - 1])
            up_move = math.log(sizes[i] / count)
            chosen.append(i if up_move <= down_move else i - 1)
        moves.append(abs(math.log(sizes[chosen[-1]] / count)))

    def direction(j: int) -> int:
        return (sizes[chosen[j]] > counts[j]) - (sizes[chosen[j]] < counts[j])

    while True:
        ups = [j for j in range(len(counts)) if direction(j) > 0]
        downs = [j for j in range(len(counts)) if direction(j) < 0]
        if abs(len(ups) - len(downs)) <= 1:
            break
        if len(downs) > len(ups):
            majority, flip = downs, up
        else:
            majority, flip = [j for j in ups if up[j] > 0], [i - 1 for i in up]
        if not majority:
            break
        j = max(majority, key=lambda j: moves[j])
        chosen[j] = flip[j]
        moves[j] = abs(math.log(sizes[chosen[j]] / counts[j]))
    return [sizes[i] for i in chosen], chosen


def predicted_interpolation_error(
    rc: RateConstants, grid_levels: Sequence[int], grid_sizes: Sequence[int]
) -> float:
    """sum_k C eta**(-beta k) M_k**(-mu) for the grids assigned to mesh levels k."""
    M = np.array([grid_sizes[level] for level in grid_levels], dtype=float)
    k = np.arange(M.size)
    return float(np.sum(rc.C * rc.eta ** (-rc.beta * k) * M ** (-rc.mu)))


def plan_model_cost(
    rc: RateConstants, grid_levels: Sequence[int], grid_sizes: Sequence[int]
) -> float:
    """sum_k M_k C_k, the model cost EstimateReport.total_model_cost charges."""
    return sum(grid_sizes[level] * level_cost(rc, k) for k, level in enumerate(grid_levels))


def best_grid_levels(
    eps: float, K: int, rc: RateConstants, grid_sizes: Sequence[int]
) -> list[int]:
    """Cheapest non-increasing grid levels whose predicted interpolation error is <= eps/2.

    Exhaustive search over non-increasing level tuples.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    best, best_cost = None, math.inf
    descending = range(len(grid_sizes) - 1, -1, -1)
    for levels in itertools.combinations_with_replacement(descending, K + 1):
        if predicted_interpolation_error(rc, levels, grid_sizes) > eps / 2.0:
            continue
        cost = plan_model_cost(rc, levels, grid_sizes)
        if cost < best_cost:
            best, best_cost = list(levels), cost
    if best is None:
        raise ValueError(f"no grid up to {grid_sizes[-1]} points reaches eps={eps} with K={K}")
    return best


def make_plan(
    eps: float,
    rc: RateConstants,
    grid_sizes: Sequence[int],
    scheme: RoundingScheme,
    K: int | None = None,
) -> LevelPlan:
    """Formula counts for (eps, K) rounded onto the grid hierarchy."""
    K = choose_K(eps, rc) if K is None else K
    raw = optimal_sample_sizes(eps, K, rc)
    if scheme == RoundingScheme.BEST:
        levels = best_grid_levels(eps, K, rc, grid_sizes)
        return LevelPlan(
            K=K,
            grid_levels=levels,
            sample_counts=[grid_sizes[level] for level in levels],
            counts_raw=raw.tolist(),
            rounding=scheme,
            constants=rc,
        )
    counts, levels = round_to_grid([math.ceil(c) for c in raw], grid_sizes, scheme)
    # grids may not grow towards finer meshes
    for k in range(K - 1, -1, -1):
        if levels[k + 1] > levels[k]:
            levels[k] = levels[k + 1]
            if scheme != RoundingScheme.CEIL:
                counts[k] = grid_sizes[levels[k]]
    return LevelPlan(
        K=K,
        grid_levels=levels,
        sample_counts=counts,
        counts_raw=raw.tolist(),
        rounding=scheme,
        constants=rc,
    )


def single_level_plan(
    eps: float, rc: RateConstants, grid_sizes: Sequence[int]
) -> tuple[int, int, int]:
    """(mesh level, grid level, points) of the single-level method for accuracy eps.

    The mesh level is the one the multilevel method ends on; the grid holds at
    least (2C/eps)**(1/mu) points.
    """
    k = choose_K(eps, rc)
    needed = math.ceil((2.0 * rc.C / eps) ** (1.0 / rc.mu))
    if needed > grid_sizes[-1]:
        raise ValueError(f"{needed} points exceed the largest grid ({grid_sizes[-1]})")
    L = _up_index(grid_sizes, needed)
    return k, L, grid_sizes[L]


def plan_rows(eps: float, rc: RateConstants, grid_sizes: Sequence[int]) -> list[dict]:
    """One row per scheme: the formula counts, then each rounding of them."""
    K = choose_K(eps, rc)
    counts = sample_counts(eps, K, rc)
    rows = [{"eps": eps, "K": K, "scheme": "formula", "counts": counts}]
    for scheme in (RoundingScheme.UP, RoundingScheme.UPDOWN):
        rounded, levels = round_to_grid(counts, grid_sizes, scheme)
        rows.append(
            {"eps": eps, "K": K, "scheme": scheme.value, "counts": rounded, "grid_levels": levels}
        )
    return rows


# =============================================================================
# CONSTANT ESTIMATION
# =============================================================================


def fit_loglog(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Least-squares (slope, intercept) of log y against log x."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.size < 2 or np.unique(x).size < 2:
        raise ValueError("need at least two distinct abscissas")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("log-log fit needs positive data")
    slope, intercept = np.polyfit(np.log(x), np.log(y), 1)
    return float(slope), float(intercept)


def fit_interpolation_rate(points: Sequence[float], errors: Sequence[float]) -> tuple[float, float]:
    """(C, mu) of errors ~ C points**(-mu)."""
    slope, intercept = fit_loglog(points, errors)
    return math.exp(intercept), -slope


def pilot_magnitude(model: SampleModel, psi: Functional) -> float:
    """|Q_1[psi(u_2)]|, the scale relative accuracies are measured against."""
    design = design_for(model, 1)
    scale = abs(quadrature(design, model.functional_samples(design.points, 2, psi)))
    if scale == 0.0:
        raise ValueError("pilot magnitude is zero, relative constants are undefined")
    return scale


def estimate_constants(
    model: SampleModel,
    psi: Functional,
    *,
    pilot_grid_levels: Sequence[int] = (0, 1, 2),
    truth_grid_level: int = 3,
    relative: bool = True,
    cost: CostModel = CostModel(),
) -> RateConstants:
    """Pilot estimates of the rates from mesh levels 0..2 and grid levels 0..3.

    alpha comes from the level-1 quadratures of psi(u_1) - psi(u_0) and
    psi(u_2) - psi(u_1), beta is set to alpha. (C, mu) come from one pooled
    log-log fit of the quadrature errors of psi(u_0) and psi(u_1) - psi(u_0)
    against the point count, each scaled by h**-beta of its finer mesh.
    """
    eta, h0 = model.eta, model.h0
    with logfire.span("estimate constants"):
        level_one = design_for(model, 1)
        u = [model.functional_samples(level_one.points, k, psi) for k in range(3)]
        d1 = quadrature(level_one, u[1] - u[0])
        d2 = quadrature(level_one, u[2] - u[1])
        if d1 == 0.0 or d2 == 0.0:
            raise ValueError("a pilot level difference is zero, rates cannot be fitted")
        alpha = math.log(abs(d1) / abs(d2), eta)
        if not alpha > 0:
            raise ValueError(f"pilot differences do not decay (alpha={alpha:.3g})")
        h1 = model.mesh_width(1)
        C_s = abs(d1) / (h1**alpha * (eta**alpha - 1.0))
        beta = alpha

        scale = pilot_magnitude(model, psi) if relative else 1.0

        truth = design_for(model, truth_grid_level)
        truth0 = model.functional_samples(truth.points, 0, psi)
        truth1 = model.functional_samples(truth.points, 1, psi) - truth0
        exact = [quadrature(truth, truth0), quadrature(truth, truth1)]
        widths = [model.mesh_width(0), h1]

        counts, errors = [], []
        for L in pilot_grid_levels:
            design = design_for(model, L)
            v0 = model.functional_samples(design.points, 0, psi)
            v1 = model.functional_samples(design.points, 1, psi) - v0
            for target, values, h in zip(exact, (v0, v1), widths):
                error = abs(target - quadrature(design, values)) / h**beta
                if error > 0:
                    counts.append(design.point_count)
                    errors.append(error)
        C, mu = fit_interpolation_rate(counts, errors)
        if not mu > 0:
            raise ValueError(f"interpolation errors do not decay (mu={mu:.3g})")

    gamma = float(model.spatial_dim) if cost.gamma is None else cost.gamma
    constants = RateConstants(
        alpha=alpha,
        C_s=C_s * h0**alpha / scale,
        beta=beta,
        mu=mu,
        C=C * h0**beta / scale,
        gamma=gamma,
        C_c=cost.C_c,
        eta=eta,
        h0=h0,
        value_scale=scale,
    )
    logger.info(
        "constants: alpha=%.3f C_s=%.3e mu=%.3f C=%.3e scale=%.3e",
        alpha, constants.C_s, mu, constants.C, scale,
    )
    return constants


# =============================================================================
# ADAPTIVE DRIVER
# =============================================================================


def convergence_test(level_difference: float, rc: RateConstants, eps: float) -> bool:
    """|Q[psi(u_K) - psi(u_{K-1})]| <= (eta**alpha - 1) eps / 2."""
    return abs(level_difference) <= (rc.eta**rc.alpha - 1.0) * eps / 2.0


def adaptive_driver(
    model: SampleModel,
    psi: Functional,
    eps: float,
    scheme: RoundingScheme,
    *,
    constants: RateConstants | None = None,
    max_levels: int = DEFAULT_MAX_LEVELS,
    max_grid_level: int = 6,
    cost: CostModel = CostModel(),
) -> tuple[LevelPlan, EstimateReport]:
    """Add levels from K = 1 until the measured level difference passes the test."""
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    rc = constants if constants is not None else estimate_constants(model, psi, cost=cost)
    sizes = grid_cardinalities(
        model.grid_kind, model.parameter_dimension, max_grid_level, model.grid_weights
    )
    history: list[dict] = []
    for K in range(1, max_levels + 1):
        with logfire.span("adaptive iteration K={K}", K=K, eps=eps):
            plan = make_plan(eps, rc, sizes, scheme, K=K)
            report = mlsc_estimate(model, plan, psi, cost=cost)
            design = design_for(model, plan.grid_levels[K])
            difference = quadrature(
                design,
                model.functional_samples(design.points, K, psi)
                - model.functional_samples(design.points, K - 1, psi),
            )
        measured = difference / rc.value_scale
        converged = convergence_test(measured, rc, eps)
        history.append(
            {
                "K": K,
                "grid_levels": plan.grid_levels,
                "difference": measured,
                "value": report.value,
                "converged": converged,
            }
        )
        logger.info(
            "K=%d grids=%s difference=%.3e value=%.10e%s",
            K, plan.grid_levels, measured, report.value, " converged" if converged else "",
        )
        if converged:
            return plan, report
    raise MaxLevelsExceeded(history)


# =============================================================================
# EPSILON-COST
# =============================================================================


def theoretical_cost(eps: float, rc: RateConstants, *, strict: bool = False) -> CostPrediction:
    """Multilevel and single-level epsilon-cost exponents and values (up to constants)."""
    if not 0 < eps < math.exp(-1):
        if strict:
            raise ValueError(f"eps must lie in (0, 1/e), got {eps}")
        logger.warning("eps=%g is outside (0, 1/e); the cost bound is not asserted there", eps)
    excess = rc.beta - rc.mu * rc.gamma
    if excess > 0:
        regime, exponent, log_exponent = CostRegime.BETA_GT, 1.0 / rc.mu, 0.0
    elif excess == 0:
        regime, exponent, log_exponent = CostRegime.BETA_EQ, 1.0 / rc.mu, 1.0 + 1.0 / rc.mu
    else:
        regime = CostRegime.BETA_LT
        exponent = 1.0 / rc.mu + (rc.gamma * rc.mu - rc.beta) / (rc.alpha * rc.mu)
        log_exponent = 0.0
    sl_exponent = 1.0 / rc.mu + rc.gamma / rc.alpha
    log_factor = abs(math.log(eps)) ** log_exponent if eps > 0 else math.inf
    return CostPrediction(
        regime=regime,
        ml_exponent=exponent,
        log_exponent=log_exponent,
        sl_exponent=sl_exponent,
        ml_cost=eps ** (-exponent) * log_factor if eps > 0 else math.inf,
        sl_cost=eps ** (-sl_exponent) if eps > 0 else math.inf,
    )


def zeta_proxy(
    model: SampleModel,
    psi: Functional,
    k: int,
    *,
    points: int = 64,
    seed: int = 0,
    difference: bool = False,
) -> float:
    """max over random parameter points of |psi(u_k)|, or of |psi(u_k) - psi(u_{k-1})|."""
    rng = np.random.default_rng([seed, k])
    Y = rng.uniform(-1.0, 1.0, size=(points, model.parameter_dimension))
    values = model.functional_samples(Y, k, psi)
    if difference and k > 0:
        values = values - model.functional_samples(Y, k - 1, psi)
    return float(np.max(np.abs(values)))
