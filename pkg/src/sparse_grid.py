"""Generalized sparse-grid interpolation and quadrature on [-1, 1]^N.

A design is built from 1D Clenshaw-Curtis rules and a downward-closed set of
level multi-indices. Every abscissa is generated from its exact rational
position t = j / (p - 1) on [0, 1], so a point shared by two levels is the same
float bit for bit and designs dedupe by exact comparison of position ids.

Interpolation runs the combination formula term by term: each tensor term
contracts its block of sample values with barycentric Lagrange weights one
dimension at a time. Values may be scalars or whole vectors (e.g. nodal
coefficients), the trailing axes are carried through untouched.
"""

import json
import logging
import math
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import logfire
import numpy as np

from .schemas import GridKind

logger = logging.getLogger(__name__)

DESIGN_FORMAT_VERSION = 1

MultiIndex = tuple[int, ...]


# =============================================================================
# 1D RULES
# =============================================================================


def growth(level: int, kind: GridKind) -> int:
    """Number of 1D points p(l) used at `level`."""
    if level < 1:
        raise ValueError(f"level must be >= 1, got {level}")
    if kind.nested:
        return 1 if level == 1 else 2 ** (level - 1) + 1
    return level


@dataclass(frozen=True)
class OneDimRule:
    """Clenshaw-Curtis rule for the uniform density 1/2 on [-1, 1]."""

    level: int
    point_count: int
    positions: tuple[Fraction, ...]
    abscissas: np.ndarray
    quad_weights: np.ndarray
    bary_weights: np.ndarray


def _abscissa(t: Fraction) -> float:
    # y = -cos(pi t) = sin(pi (t - 1/2)); the odd form keeps y(1 - t) == -y(t) exactly
    s = t - Fraction(1, 2)
    return math.copysign(math.sin(math.pi * float(abs(s))), float(s))


def _cc_weights(p: int) -> np.ndarray:
    if p == 1:
        return np.ones(1)
    n = p - 1
    theta = np.pi * np.arange(p) / n
    w = np.ones(p)
    for k in range(1, n // 2 + 1):
        b = 1.0 if 2 * k == n else 2.0
        w -= b / (4 * k * k - 1) * np.cos(2 * k * theta)
    c = np.full(p, 2.0)
    c[0] = c[-1] = 1.0
    # c_j / n gives weights on [-1, 1] summing to 2; halve for the density 1/2
    return 0.5 * c * w / n


@lru_cache(maxsize=64)
def cc_abscissas(level: int, kind: GridKind = GridKind.SMOLYAK) -> OneDimRule:
    """1D rule at `level` under the growth map of `kind`.

    A single point sits at 0 with weight 1. Otherwise the points are the
    Chebyshev extrema -cos(pi j / (p - 1)), j = 0..p-1.
    """
    p = growth(level, kind)
    if p == 1:
        positions = (Fraction(1, 2),)
        bary = np.ones(1)
    else:
        positions = tuple(Fraction(j, p - 1) for j in range(p))
        bary = np.array([(-1.0) ** j for j in range(p)])
        bary[0] *= 0.5
        bary[-1] *= 0.5
    abscissas = np.array([_abscissa(t) for t in positions])
    return OneDimRule(
        level=level,
        point_count=p,
        positions=positions,
        abscissas=abscissas,
        quad_weights=_cc_weights(p),
        bary_weights=bary,
    )


def lagrange_basis(rule: OneDimRule, y: float) -> np.ndarray:
    """Values of the p Lagrange fundamental polynomials of `rule` at `y`."""
    if rule.point_count == 1:
        return np.ones(1)
    diff = y - rule.abscissas
    hit = np.flatnonzero(diff == 0.0)
    if hit.size:
        basis = np.zeros(rule.point_count)
        basis[hit[0]] = 1.0
        return basis
    terms = rule.bary_weights / diff
    return terms / terms.sum()


# =============================================================================
# INDEX SETS
# =============================================================================


@dataclass(frozen=True)
class MultiIndexSet:
    dimension: int
    kind: GridKind
    level: int
    weights: tuple[float, ...] | None
    members: frozenset[MultiIndex]

    def __len__(self) -> int:
        return len(self.members)

    def __contains__(self, index: object) -> bool:
        return index in self.members

    def sorted_members(self) -> list[MultiIndex]:
        return sorted(self.members)

    def is_downward_closed(self) -> bool:
        for index in self.members:
            for n, entry in enumerate(index):
                if entry > 1 and _shift(index, n, -1) not in self.members:
                    return False
        return True


def _shift(index: MultiIndex, n: int, step: int) -> MultiIndex:
    return index[:n] + (index[n] + step,) + index[n + 1 :]


def _stepper(
    kind: GridKind, level: int, weights: Sequence[float] | None
) -> tuple[float, Callable[[float, int, int], float | None]]:
    """Initial budget and the per-coordinate budget update for `kind`.

    The update returns None once a coordinate value leaves the set. All level
    functions are monotone, so a failing value ends the scan in that coordinate.
    """
    if kind == GridKind.TENSOR_PRODUCT:
        return level, lambda budget, n, entry: budget if entry - 1 <= level else None
    if kind == GridKind.HYPERBOLIC_CROSS:
        # prod(l_n) <= L + 1, budget is the product so far
        return 1.0, lambda budget, n, entry: (
            budget * entry if budget * entry <= level + 1 else None
        )
    if kind == GridKind.ANISOTROPIC_SMOLYAK:
        alpha_min = min(weights)
        ratios = [a / alpha_min for a in weights]

        def anisotropic(budget: float, n: int, entry: int) -> float | None:
            remaining = budget - ratios[n] * (entry - 1)
            return remaining if remaining >= -1e-12 else None

        return float(level), anisotropic
    return float(level), lambda budget, n, entry: (
        budget - (entry - 1) if entry - 1 <= budget else None
    )


def build_index_set(
    kind: GridKind, N: int, L: int, weights: Sequence[float] | None = None
) -> MultiIndexSet:
    """All multi-indices l >= 1 with g(l) <= L for the level function of `kind`.

    Hyperbolic crosses use prod_n l_n <= L + 1, which keeps the set finite.
    """
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    if L < 0:
        raise ValueError(f"L must be >= 0, got {L}")
    if kind == GridKind.ANISOTROPIC_SMOLYAK:
        if weights is None or len(weights) != N:
            raise ValueError("anisotropic_smolyak needs N weights")
        if any(not w > 0 for w in weights):
            raise ValueError("weights must be positive")
        weights = tuple(float(w) for w in weights)
    elif weights is not None:
        raise ValueError(f"weights are only used by anisotropic_smolyak, not {kind.value}")

    budget0, step = _stepper(kind, L, weights)
    members: list[MultiIndex] = []
    stack: list[tuple[MultiIndex, float]] = [((), budget0)]
    while stack:
        head, budget = stack.pop()
        n = len(head)
        if n == N:
            members.append(head)
            continue
        entry = 1
        while (remaining := step(budget, n, entry)) is not None:
            stack.append((head + (entry,), remaining))
            entry += 1
    return MultiIndexSet(
        dimension=N, kind=kind, level=L, weights=weights, members=frozenset(members)
    )


def index_set_from_members(
    members: Iterable[Sequence[int]], kind: GridKind = GridKind.SMOLYAK
) -> MultiIndexSet:
    """Wrap an explicit collection of multi-indices (checked for downward closure)."""
    members = frozenset(tuple(int(e) for e in index) for index in members)
    if not members:
        raise ValueError("index set is empty")
    dims = {len(index) for index in members}
    if len(dims) != 1:
        raise ValueError("multi-indices of mixed length")
    if any(e < 1 for index in members for e in index):
        raise ValueError("multi-index entries must be >= 1")
    index_set = MultiIndexSet(
        dimension=dims.pop(), kind=kind, level=-1, weights=None, members=members
    )
    if not index_set.is_downward_closed():
        raise ValueError("index set is not downward closed")
    return index_set


def combination_coefficients(index_set: MultiIndexSet) -> dict[MultiIndex, int]:
    """c_l = sum over z in {0,1}^N with l + z in the set of (-1)^|z|; zeros dropped.

    Only shifts along directions n with l + e_n in the set can contribute, and
    a shift outside the set has no admissible supersets, so the subset scan is
    pruned depth first.
    """
    if not index_set.is_downward_closed():
        raise ValueError("combination coefficients need a downward-closed set")
    members = index_set.members
    coefficients: dict[MultiIndex, int] = {}
    for index in members:
        active = [n for n in range(index_set.dimension) if _shift(index, n, 1) in members]
        total = 0
        stack: list[tuple[MultiIndex, int, int]] = [(index, 0, 1)]
        while stack:
            shifted, start, sign = stack.pop()
            total += sign
            for position in range(start, len(active)):
                candidate = _shift(shifted, active[position], 1)
                if candidate in members:
                    stack.append((candidate, position + 1, -sign))
        if total:
            coefficients[index] = total
    return coefficients


def _increment(level: int, kind: GridKind) -> int:
    return growth(level, kind) - (growth(level - 1, kind) if level > 1 else 0)


def point_count(index_set: MultiIndexSet) -> int:
    """Number of distinct points of the design on `index_set`.

    Nested rules add p(l) - p(l - 1) new points per level, so the count is a
    sum of products and needs no point enumeration.
    """
    if not index_set.kind.nested:
        return enumerate_points(index_set).point_count
    return sum(
        math.prod(_increment(entry, index_set.kind) for entry in index)
        for index in index_set.members
    )


def smolyak_point_count(N: int, L: int) -> int:
    """Cardinality of the isotropic Smolyak CC design without building the index set."""
    increments = [_increment(level, GridKind.SMOLYAK) for level in range(1, L + 2)]
    # counts[s] = weighted number of multi-indices with sum(l - 1) == s
    counts = np.zeros(L + 1, dtype=object)
    counts[0] = 1
    for _ in range(N):
        updated = np.zeros(L + 1, dtype=object)
        for s in range(L + 1):
            for extra in range(L + 1 - s):
                updated[s + extra] += counts[s] * increments[extra]
        counts = updated
    return int(sum(counts))


# =============================================================================
# DESIGNS
# =============================================================================


@dataclass(frozen=True)
class TensorTerm:
    index: MultiIndex
    coeff: int
    shape: tuple[int, ...]
    point_ids: np.ndarray


@dataclass(frozen=True)
class SparseGridDesign:
    index_set: MultiIndexSet
    combo_coeffs: dict[MultiIndex, int]
    points: np.ndarray
    quad_weights: np.ndarray
    terms: tuple[TensorTerm, ...]

    @property
    def point_count(self) -> int:
        return self.points.shape[0]

    @property
    def dimension(self) -> int:
        return self.index_set.dimension

    def rule(self, level: int) -> OneDimRule:
        return cc_abscissas(level, self.index_set.kind)

    def to_json_dict(self) -> dict:
        return {
            "version": DESIGN_FORMAT_VERSION,
            "kind": self.index_set.kind.value,
            "N": self.index_set.dimension,
            "L": self.index_set.level,
            "weights": list(self.index_set.weights) if self.index_set.weights else None,
            "points": self.points.tolist(),
            "quad_weights": self.quad_weights.tolist(),
            "combo": [
                {"index": list(index), "coeff": coeff}
                for index, coeff in sorted(self.combo_coeffs.items())
            ],
        }


def _cartesian(arrays: Sequence[np.ndarray]) -> np.ndarray:
    grids = np.meshgrid(*arrays, indexing="ij")
    return np.stack([grid.ravel() for grid in grids], axis=-1)


def enumerate_points(index_set: MultiIndexSet) -> SparseGridDesign:
    """Deduplicated collocation points and quadrature weights of the design."""
    kind = index_set.kind
    coeffs = combination_coefficients(index_set)
    max_level = max(max(index) for index in index_set.members)
    rules = {level: cc_abscissas(level, kind) for level in range(1, max_level + 1)}

    positions = sorted({t for rule in rules.values() for t in rule.positions})
    position_id = {t: i for i, t in enumerate(positions)}
    coordinates = np.array([_abscissa(t) for t in positions])
    level_ids = {
        level: np.array([position_id[t] for t in rule.positions], dtype=np.int32)
        for level, rule in rules.items()
    }

    with logfire.span(
        "sparse grid design {kind} N={N} L={L}",
        kind=kind.value,
        N=index_set.dimension,
        L=index_set.level,
    ):
        ordered = sorted(coeffs)
        rows, contributions, shapes = [], [], []
        for index in ordered:
            rows.append(_cartesian([level_ids[level] for level in index]))
            weights = _cartesian([rules[level].quad_weights for level in index]).prod(axis=1)
            contributions.append(coeffs[index] * weights)
            shapes.append(tuple(rules[level].point_count for level in index))

        stacked = np.concatenate(rows, axis=0)
        unique_rows, inverse = np.unique(stacked, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        quad_weights = np.bincount(
            inverse, weights=np.concatenate(contributions), minlength=unique_rows.shape[0]
        )

        terms, offset = [], 0
        for index, shape in zip(ordered, shapes):
            size = math.prod(shape)
            terms.append(
                TensorTerm(
                    index=index,
                    coeff=coeffs[index],
                    shape=shape,
                    point_ids=inverse[offset : offset + size],
                )
            )
            offset += size

    design = SparseGridDesign(
        index_set=index_set,
        combo_coeffs=coeffs,
        points=coordinates[unique_rows],
        quad_weights=quad_weights,
        terms=tuple(terms),
    )
    logger.debug(
        "design %s N=%d L=%d: %d points, %d tensor terms",
        kind.value,
        index_set.dimension,
        index_set.level,
        design.point_count,
        len(terms),
    )
    return design


@lru_cache(maxsize=16)
def sparse_grid_design(
    kind: GridKind, N: int, L: int, weights: tuple[float, ...] | None = None
) -> SparseGridDesign:
    """Cached design for (kind, N, L, weights)."""
    return enumerate_points(build_index_set(kind, N, L, weights))


def design_to_json(design: SparseGridDesign) -> str:
    return json.dumps(design.to_json_dict(), indent=1)


def design_from_json(text: str) -> SparseGridDesign:
    """Rebuild a design from its JSON document and check it matches the stored points."""
    data = json.loads(text)
    if data.get("version") != DESIGN_FORMAT_VERSION:
        raise ValueError(f"unsupported design format version {data.get('version')}")
    weights = tuple(data["weights"]) if data.get("weights") else None
    kind = GridKind(data["kind"])
    design = enumerate_points(build_index_set(kind, data["N"], data["L"], weights))
    stored = np.asarray(data["points"], dtype=float)
    if stored.shape != design.points.shape or not np.allclose(stored, design.points, atol=1e-15):
        raise ValueError("stored points do not match the rebuilt design")
    return design


# =============================================================================
# INTERPOLANTS
# =============================================================================


@dataclass(frozen=True)
class Interpolant:
    """Sample values attached to a design; values[m] belongs to design.points[m]."""

    design: SparseGridDesign
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 0 or values.shape[0] != self.design.point_count:
            raise ValueError(
                f"need {self.design.point_count} values, got shape {values.shape}"
            )
        object.__setattr__(self, "values", values)


def interpolate(interp: Interpolant, y: Sequence[float]) -> float | np.ndarray:
    """Evaluate the sparse-grid interpolant at the parameter point `y`."""
    design = interp.design
    y = np.asarray(y, dtype=float)
    if y.shape != (design.dimension,):
        raise ValueError(f"y must have shape ({design.dimension},), got {y.shape}")
    if np.any(np.abs(y) > 1.0):
        raise ValueError("y must lie in [-1, 1]^N")

    value_shape = interp.values.shape[1:]
    bases: dict[tuple[int, int], np.ndarray] = {}
    total = np.zeros(value_shape)
    for term in design.terms:
        block = interp.values[term.point_ids].reshape(term.shape + value_shape)
        # contract the leading axis dimension by dimension; single-point levels squeeze
        for n, level in enumerate(term.index):
            if term.shape[n] == 1:
                block = block[0]
                continue
            key = (n, level)
            if key not in bases:
                bases[key] = lagrange_basis(design.rule(level), y[n])
            block = np.tensordot(bases[key], block, axes=(0, 0))
        total = total + term.coeff * block
    return float(total) if total.ndim == 0 else total


def expectation(interp: Interpolant) -> float | np.ndarray:
    """Integral of the interpolant against the uniform density, sum_m w_m v_m."""
    weights = interp.design.quad_weights
    weighted = weights.reshape((-1,) + (1,) * (interp.values.ndim - 1)) * interp.values
    total = np.sum(weighted, axis=0)
    return float(total) if np.ndim(total) == 0 else total


def quadrature(design: SparseGridDesign, samples: np.ndarray) -> float:
    """Sparse-grid quadrature of scalar samples aligned with the design points."""
    samples = np.asarray(samples, dtype=float)
    if samples.shape != (design.point_count,):
        raise ValueError(f"need {design.point_count} samples, got shape {samples.shape}")
    return float(np.sum(design.quad_weights * samples))


# =============================================================================
# RATES
# =============================================================================


def weight_from_tau(tau: float, interval_width: float) -> float:
    """Anisotropy weight alpha_n from the analyticity radius tau_n of direction n."""
    if not tau > 0 or not interval_width > 0:
        raise ValueError("tau and interval_width must be positive")
    ratio = 2.0 * tau / interval_width
    return 0.5 * math.log(ratio + math.sqrt(1.0 + ratio * ratio))


def predicted_mu(
    N: int, alpha_min: float, grid_kind: GridKind, alphas: Sequence[float] | None = None
) -> float:
    """Algebraic interpolation rate in the number of points M for analytic interpolands."""
    if N < 1 or not alpha_min > 0:
        raise ValueError("N must be >= 1 and alpha_min positive")
    if grid_kind == GridKind.TENSOR_PRODUCT:
        return alpha_min / N
    if grid_kind == GridKind.SMOLYAK:
        return alpha_min / (1.0 + math.log(2 * N))
    if grid_kind == GridKind.ANISOTROPIC_SMOLYAK:
        if alphas is None or len(alphas) != N:
            raise ValueError("anisotropic rate needs the N weights alphas")
        return (
            alpha_min
            * (math.log(2) * math.e - 0.5)
            / (math.log(2) + sum(alpha_min / a for a in alphas))
        )
    raise ValueError(f"no rate available for {grid_kind.value}")
