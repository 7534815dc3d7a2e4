"""Pydantic schemas for multilevel stochastic collocation experiments.

Schema conventions:
- Enums are the canonical value sets shared by the CLI, config files and JSON output
- Field descriptions document units and index conventions
- Validators enforce the hypotheses the allocation formulas rely on

Index conventions:
- k indexes the spatial hierarchy, h_k = h_0 * eta**(-k), k = 0..K
- A LevelPlan lists, for every k, the sparse-grid level used on that mesh, so
  position k holds L_{K-k} (largest grid on the coarsest mesh)
"""

import logging
import math
from enum import Enum
from typing import Annotated, Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

logger = logging.getLogger(__name__)


# =============================================================================
# ENUMS: Canonical value sets
# =============================================================================


class GridKind(str, Enum):
    """Admissible index-set families with their growth maps p(l) and level functions g(l)."""

    TENSOR_PRODUCT = "tensor_product"
    """p(l) = l, g(l) = max_n (l_n - 1)."""

    TOTAL_DEGREE = "total_degree"
    """p(l) = l, g(l) = sum_n (l_n - 1)."""

    HYPERBOLIC_CROSS = "hyperbolic_cross"
    """p(l) = l, members satisfy prod_n l_n <= L + 1."""

    SMOLYAK = "smolyak"
    """p(1) = 1, p(l) = 2**(l-1) + 1, g(l) = sum_n (l_n - 1). Nested Clenshaw-Curtis."""

    ANISOTROPIC_SMOLYAK = "anisotropic_smolyak"
    """Smolyak growth, g(l) = sum_n (alpha_n / alpha_min)(l_n - 1)."""

    @property
    def nested(self) -> bool:
        """True when the 1D rules of consecutive levels are nested."""
        return self in (GridKind.SMOLYAK, GridKind.ANISOTROPIC_SMOLYAK)


class RoundingScheme(str, Enum):
    """How formula sample counts are mapped onto realizable sparse grids."""

    CEIL = "ceil"
    """Integer ceiling only. Executed plans use the smallest grid holding the count."""

    UP = "up"
    """Each count goes to the smallest grid cardinality >= count."""

    UPDOWN = "updown"
    """Nearest grid in log-ratio, then rebalanced so ups and downs differ by at most one."""

    BEST = "best"
    """Cheapest non-increasing grid levels whose predicted interpolation error is <= eps/2."""


class EstimatorMethod(str, Enum):
    SLSC = "slsc"
    MLSC = "mlsc"
    MC = "mc"
    MLMC = "mlmc"
    ADAPTIVE = "adaptive"


class CostRegime(str, Enum):
    """The three cases of the multilevel epsilon-cost bound."""

    BETA_GT = "beta_gt"
    """beta > mu*gamma: cost ~ eps**(-1/mu)."""

    BETA_EQ = "beta_eq"
    """beta = mu*gamma: cost ~ eps**(-1/mu) |log eps|**(1 + 1/mu)."""

    BETA_LT = "beta_lt"
    """beta < mu*gamma: cost ~ eps**(-1/mu - (gamma*mu - beta)/(alpha*mu))."""


# =============================================================================
# FUNCTIONALS: quantities of interest psi(u)
# =============================================================================


class PointValue(BaseModel):
    """psi(u) = u(x*). Bounded linear for P1 functions."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["point"] = "point"
    x: tuple[float, ...] = Field(description="Evaluation point, one coordinate per dimension")


class LocalAverage(BaseModel):
    """psi(u) = |D*|^-1 int_{D*} u, D* the support of the hat function of `node`
    on the uniform reference mesh of width `reference_width` (six triangles in 2D,
    two intervals in 1D)."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["local_average"] = "local_average"
    node: tuple[float, ...] = Field(description="Reference-mesh node at the center of D*")
    reference_width: float = Field(
        default=1 / 256, gt=0, le=0.5, description="Mesh width of the mesh defining D*"
    )


class L2NormSquared(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["l2_squared"] = "l2_squared"


class L2Norm(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["l2"] = "l2"


LinearFunctional = Annotated[PointValue | LocalAverage, Field(discriminator="kind")]


class PowerOfLinear(BaseModel):
    """psi(u) = phi(u)**q for a bounded linear phi."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["power"] = "power"
    inner: LinearFunctional
    q: int = Field(ge=1, description="Moment order")


Functional = Annotated[
    PointValue | LocalAverage | L2NormSquared | L2Norm | PowerOfLinear,
    Field(discriminator="kind"),
]


# =============================================================================
# ALLOCATION: constants, plans and cost predictions
# =============================================================================


class RateConstants(BaseModel):
    """Rates and constants of the spatial/stochastic error and cost models.

    Only the product C = C_I * C_zeta enters the sample-count formula, so it is
    carried as a single constant.
    """

    model_config = ConfigDict(frozen=True)

    alpha: float = Field(gt=0, description="Spatial rate: |E[psi(u) - psi(u_h)]| <= C_s h**alpha")
    C_s: float = Field(gt=0, description="Spatial constant")
    beta: float = Field(gt=0, description="Decay rate of zeta(psi(u_h_k) - psi(u_h_k-1)) in h_k")
    mu: float = Field(gt=0, description="Interpolation rate: error ~ C M**(-mu)")
    C: float = Field(gt=0, description="Combined interpolation constant C_I * C_zeta")
    gamma: float = Field(gt=0, description="Cost exponent: C_k = C_c h_k**(-gamma)")
    C_c: float = Field(default=1.0, gt=0, description="Cost constant")
    eta: float = Field(default=2.0, gt=1, description="Mesh refinement ratio")
    h0: float = Field(default=1.0, gt=0, description="Coarsest mesh width")
    value_scale: float = Field(
        default=1.0,
        gt=0,
        description="Magnitude |E[psi]| the constants are relative to (1.0 for absolute constants)",
    )

    @model_validator(mode="after")
    def warn_on_rate_hypothesis(self) -> "RateConstants":
        """The epsilon-cost bound assumes alpha >= min(beta, mu * gamma)."""
        if self.alpha < min(self.beta, self.mu * self.gamma):
            logger.warning(
                "alpha=%.3g < min(beta, mu*gamma)=%.3g; cost bounds do not apply",
                self.alpha,
                min(self.beta, self.mu * self.gamma),
            )
        return self


class LevelPlan(BaseModel):
    """Pairing of mesh levels k = 0..K with sparse-grid levels L_{K-k}."""

    K: int = Field(ge=0, description="Finest mesh level")
    grid_levels: list[int] = Field(description="Sparse-grid level used on mesh level k")
    sample_counts: list[int] = Field(description="Collocation points M_{K-k} on mesh level k")
    counts_raw: list[float] | None = Field(
        default=None, description="Unrounded formula counts, when the plan came from the formula"
    )
    rounding: RoundingScheme = RoundingScheme.UP
    constants: RateConstants | None = None

    @model_validator(mode="after")
    def check_shape(self) -> "LevelPlan":
        if len(self.grid_levels) != self.K + 1 or len(self.sample_counts) != self.K + 1:
            raise ValueError("grid_levels and sample_counts need K + 1 entries")
        if any(level < 0 for level in self.grid_levels):
            raise ValueError("grid_levels must be non-negative")
        for k in range(self.K):
            if self.grid_levels[k + 1] > self.grid_levels[k]:
                raise ValueError("grid_levels must be non-increasing in k")
        return self


class CostPrediction(BaseModel):
    """Epsilon-cost exponents of the multilevel and single-level methods."""

    regime: CostRegime
    ml_exponent: float = Field(description="Cost ~ eps**(-ml_exponent) |log eps|**log_exponent")
    log_exponent: float
    sl_exponent: float = Field(description="Single level: 1/mu + gamma/alpha")
    ml_cost: float = Field(description="Multilevel cost up to a constant")
    sl_cost: float = Field(description="Single-level cost up to a constant")


# =============================================================================
# REPORTS
# =============================================================================


class LevelContribution(BaseModel):
    k: int
    grid_level: int | None = Field(default=None, description="None for Monte Carlo levels")
    points: int = Field(description="Collocation points or Monte Carlo samples on this level")
    contribution: float
    model_cost: float = Field(description="points * C_k under the cost metric")
    solves: int = Field(default=0, description="PDE solves actually performed for this level")
    grouped_into: int | None = Field(
        default=None, description="Level whose grouped difference absorbed this level"
    )
    variance: float | None = Field(default=None, description="Sample variance (Monte Carlo only)")


class EstimateReport(BaseModel):
    """Estimator output with cost bookkeeping."""

    method: EstimatorMethod
    value: float
    per_level: list[LevelContribution]
    total_model_cost: float = Field(description="sum_k M_{K-k} C_k, cancellations ignored")
    total_solve_count: int = Field(description="Solves performed, cancellations included")
    solve_cost: float = Field(description="Cost of the solves performed, C_c h**(-gamma) each")
    wall_time: float = Field(description="Seconds")
    reference: float | None = None
    relative_error: float | None = None
    interp_error: float | None = None
    spatial_error: float | None = None
    seed: int | None = None

    def with_reference(self, reference: float) -> "EstimateReport":
        """Copy with the error relative to `reference` filled in."""
        rel = abs(self.value - reference) / abs(reference) if reference else None
        return self.model_copy(update={"reference": reference, "relative_error": rel})


# =============================================================================
# EXPERIMENT CONFIGURATION
# =============================================================================


class ExperimentConfig(BaseModel):
    """Flat experiment configuration (TOML keys map one-to-one onto fields)."""

    model_config = ConfigDict(extra="forbid")

    spatial_dim: Literal[1, 2] = Field(description="Dimension d of D = (0,1)^d")
    N: int = Field(ge=1, description="Number of random variables (KL truncation)")
    h0: float = Field(gt=0, le=0.5, description="Coarsest mesh width")
    eta: int = Field(default=2, ge=2, description="Mesh refinement ratio")
    coefficient: Literal["kl-exponential", "constant"] = "kl-exponential"
    constant_value: float = Field(default=1.0, gt=0, description="a for the constant coefficient")
    base_shift: float = Field(default=0.5, gt=0, description="a = base_shift + exp(...)")
    functional: Functional
    method: EstimatorMethod = EstimatorMethod.MLSC
    eps: list[float] = Field(default_factory=list, description="Relative accuracy targets")
    grid_kind: GridKind = GridKind.SMOLYAK
    grid_weights: list[float] | None = None
    grid_level: int | None = Field(default=None, ge=0)
    mesh_level: int | None = Field(default=None, ge=0)
    samples: int | None = Field(default=None, ge=1, description="Monte Carlo sample count")
    scheme: RoundingScheme = RoundingScheme.UPDOWN
    seed: int = Field(default=0, ge=0)
    reference_h: float | None = Field(default=None, gt=0)
    reference_level: int | None = Field(default=None, ge=0)
    constants: RateConstants | None = None
    max_levels: int = Field(default=10, ge=1)
    max_grid_level: int = Field(default=6, ge=1)
    sweep_methods: list[EstimatorMethod] = Field(
        default_factory=lambda: [EstimatorMethod.SLSC, EstimatorMethod.MLSC]
    )
    workers: int | None = Field(
        default=None, ge=1, description="Worker processes; MLSC_WORKERS when unset"
    )
    out: str = "results/mlsc.csv"
    cache: bool = Field(default=True, description="Read and store reference values in the cache")

    @field_validator("eps")
    @classmethod
    def positive_targets(cls, value: list[float]) -> list[float]:
        if any(not eps > 0 for eps in value):
            raise ValueError("every eps must be positive")
        return value

    @field_validator("h0")
    @classmethod
    def integral_cells(cls, value: float) -> float:
        cells = 1.0 / value
        if not math.isclose(cells, round(cells), rel_tol=0, abs_tol=1e-9):
            raise ValueError("1/h0 must be an integer")
        return value

    @model_validator(mode="after")
    def check_weights(self) -> "ExperimentConfig":
        if (self.grid_kind == GridKind.ANISOTROPIC_SMOLYAK) != (self.grid_weights is not None):
            raise ValueError("grid_weights are required exactly for anisotropic_smolyak")
        if self.grid_weights is not None and len(self.grid_weights) != self.N:
            raise ValueError("grid_weights needs N entries")
        return self
