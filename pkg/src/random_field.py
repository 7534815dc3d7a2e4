"""Karhunen-Loeve structure of the exponential covariance exp(-|x - x'|) on (0,1)^d.

1D eigenpairs are lambda_n = 2 / (w_n^2 + 1) and
b_n(x) = A_n (sin(w_n x) + w_n cos(w_n x)), where w_n are the positive roots of
tan(w) = 2w / (w^2 - 1). The 2D kernel is separable, so its eigenpairs are
products of 1D pairs.

The coefficient field is a(y, x) = base_shift + exp(sum_n sqrt(lambda_n) b_n(x) y_n).
"""

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

logger = logging.getLogger(__name__)

ROOT_XTOL = 1e-13


class RootBracketError(RuntimeError):
    """A root of the eigenvalue equation could not be isolated in its window."""


def _pole_free(w: float) -> float:
    # tan(w)(w^2 - 1) - 2w multiplied through by cos(w)
    return math.sin(w) * (w * w - 1.0) - 2.0 * w * math.cos(w)


def solve_transcendental(N: int) -> np.ndarray:
    """The N smallest positive roots of tan(w) = 2w / (w^2 - 1).

    The pole-free form changes sign once on every window ((n-1) pi, n pi), so
    each root is bracketed there and polished with Brent's method.
    """
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    roots = np.empty(N)
    for n in range(1, N + 1):
        lower = (n - 1) * math.pi if n > 1 else 1e-6
        upper = n * math.pi
        g_lower, g_upper = _pole_free(lower), _pole_free(upper)
        if g_lower * g_upper >= 0:
            raise RootBracketError(
                f"no sign change for root {n} on [{lower:.6g}, {upper:.6g}]"
            )
        roots[n - 1] = brentq(
            _pole_free, lower, upper, xtol=ROOT_XTOL, rtol=4 * np.finfo(float).eps
        )
    return roots


def normalization_constant(w: float) -> float:
    """A > 0 with int_0^1 A^2 (sin(wx) + w cos(wx))^2 dx = 1 (closed-form integral)."""
    if not w > 0:
        raise ValueError(f"w must be positive, got {w}")
    sin_2w = math.sin(2 * w)
    integral = (
        0.5 - sin_2w / (4 * w) + math.sin(w) ** 2 + 0.5 * w * w + 0.25 * w * sin_2w
    )
    return 1.0 / math.sqrt(integral)


@dataclass(frozen=True)
class KLExpansion1D:
    roots: np.ndarray
    eigenvalues: np.ndarray
    norm_constants: np.ndarray

    @property
    def N(self) -> int:
        return self.roots.shape[0]

    @property
    def spatial_dim(self) -> int:
        return 1

    def eigenfunctions(self, x: np.ndarray) -> np.ndarray:
        """(P, N) matrix of b_n(x_p) for points x of shape (P,) or (P, 1)."""
        x = np.asarray(x, dtype=float).reshape(-1, 1)
        wx = x * self.roots
        return self.norm_constants * (np.sin(wx) + self.roots * np.cos(wx))

    def to_json_dict(self) -> dict:
        return {
            "spatial_dim": 1,
            "N": self.N,
            "roots": self.roots.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "norm_constants": self.norm_constants.tolist(),
        }


def eigen_1d(N: int) -> KLExpansion1D:
    roots = solve_transcendental(N)
    return KLExpansion1D(
        roots=roots,
        eigenvalues=2.0 / (roots**2 + 1.0),
        norm_constants=np.array([normalization_constant(w) for w in roots]),
    )


@dataclass(frozen=True)
class KLExpansion2D:
    one_d: KLExpansion1D
    pairs: np.ndarray
    eigenvalues: np.ndarray

    @property
    def N(self) -> int:
        return self.pairs.shape[0]

    @property
    def spatial_dim(self) -> int:
        return 2

    def eigenfunctions(self, x: np.ndarray) -> np.ndarray:
        """(P, N) matrix of b_i(x_p1) b_j(x_p2) for points x of shape (P, 2)."""
        x = np.asarray(x, dtype=float).reshape(-1, 2)
        b1 = self.one_d.eigenfunctions(x[:, 0])
        b2 = self.one_d.eigenfunctions(x[:, 1])
        i, j = self.pairs[:, 0] - 1, self.pairs[:, 1] - 1
        return b1[:, i] * b2[:, j]

    def to_json_dict(self) -> dict:
        return {
            "spatial_dim": 2,
            "N": self.N,
            "pairs": self.pairs.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "one_d": self.one_d.to_json_dict(),
        }


def default_pool_size(N: int) -> int:
    return max(2 * math.ceil(math.sqrt(N)), 10)


def eigen_2d(N: int, M1: int | None = None) -> KLExpansion2D:
    """Top-N products lambda_i lambda_j over the pool (i, j) in {1..M1}^2.

    Ties are broken by (i, j) lexicographically. The pool is certified when the
    best candidate outside it, lambda_1 lambda_{M1+1}, cannot displace the
    N-th kept product.
    """
    M1 = default_pool_size(N) if M1 is None else M1
    if M1 * M1 < N:
        raise ValueError(f"pool size M1={M1} gives fewer than N={N} products")
    pool = eigen_1d(M1 + 1)
    lam = pool.eigenvalues
    candidates = [
        (-lam[i] * lam[j], i + 1, j + 1) for i in range(M1) for j in range(M1)
    ]
    candidates.sort()
    kept = candidates[:N]
    smallest_kept = -kept[-1][0]
    outside = lam[0] * lam[M1]
    if outside > smallest_kept:
        raise ValueError(
            f"pool size M1={M1} cannot certify the top {N} eigenpairs "
            f"({outside:.3e} > {smallest_kept:.3e})"
        )
    one_d = KLExpansion1D(
        roots=pool.roots[:M1],
        eigenvalues=pool.eigenvalues[:M1],
        norm_constants=pool.norm_constants[:M1],
    )
    return KLExpansion2D(
        one_d=one_d,
        pairs=np.array([(i, j) for _, i, j in kept], dtype=np.int64),
        eigenvalues=np.array([-value for value, _, _ in kept]),
    )


def kl_expansion(spatial_dim: int, N: int) -> KLExpansion1D | KLExpansion2D:
    if spatial_dim == 1:
        return eigen_1d(N)
    if spatial_dim == 2:
        return eigen_2d(N)
    raise ValueError(f"spatial_dim must be 1 or 2, got {spatial_dim}")


# =============================================================================
# COEFFICIENTS
# =============================================================================


@dataclass(frozen=True)
class CoefficientField:
    """a(y, x) = base_shift + exp(sum_n sqrt(lambda_n) b_n(x) y_n)."""

    expansion: KLExpansion1D | KLExpansion2D
    base_shift: float = 0.5

    @property
    def parameter_dimension(self) -> int:
        return self.expansion.N

    @property
    def spatial_dim(self) -> int:
        return self.expansion.spatial_dim

    def kl_matrix(self, x: np.ndarray) -> np.ndarray:
        """(P, N) matrix sqrt(lambda_n) b_n(x_p)."""
        return self.expansion.eigenfunctions(x) * np.sqrt(self.expansion.eigenvalues)

    def sampler(self, x: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
        """Map parameter rows Y of shape (S, N) to coefficient values (S, P) at x."""
        basis = self.kl_matrix(x)

        def sample(Y: np.ndarray) -> np.ndarray:
            return self.base_shift + np.exp(np.asarray(Y, dtype=float) @ basis.T)

        return sample

    def describe(self) -> dict:
        return {
            "kind": "kl-exponential",
            "spatial_dim": self.spatial_dim,
            "N": self.parameter_dimension,
            "base_shift": self.base_shift,
        }


@dataclass(frozen=True)
class ConstantCoefficient:
    """Parameter-independent coefficient a(y, x) = value (deterministic problems)."""

    value: float
    spatial_dim: int = 1
    parameter_dimension: int = 1

    def sampler(self, x: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
        points = np.asarray(x).shape[0]

        def sample(Y: np.ndarray) -> np.ndarray:
            return np.full((np.asarray(Y).shape[0], points), self.value)

        return sample

    def describe(self) -> dict:
        return {
            "kind": "constant",
            "value": self.value,
            "spatial_dim": self.spatial_dim,
            "N": self.parameter_dimension,
        }


def eval_coefficient(
    coefficient: CoefficientField | ConstantCoefficient, y: np.ndarray, x: np.ndarray
) -> np.ndarray:
    """a(y, x) at one parameter vector y and points x of shape (P,) or (P, d)."""
    y = np.asarray(y, dtype=float)
    if y.shape != (coefficient.parameter_dimension,):
        raise ValueError(
            f"y has shape {y.shape}, expected ({coefficient.parameter_dimension},)"
        )
    x = np.asarray(x, dtype=float)
    if coefficient.spatial_dim == 2:
        x = x.reshape(-1, 2)
    else:
        x = x.reshape(-1)
    return coefficient.sampler(x)(y[None, :])[0]
