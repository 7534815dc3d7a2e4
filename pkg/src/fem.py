"""P1 finite elements for -div(a grad u) = 1 on (0,1)^d, u = 0 on the boundary.

Meshes are uniform: intervals of width h in 1D, and in 2D square cells split
by the bottom-left to top-right diagonal, so every refinement by an integer
ratio is nested. Nodes are numbered lexicographically by (x, y), node (i, j)
has id i * (n + 1) + j. Solutions store interior nodal values only.

The coefficient is sampled once per element (interval midpoint, triangle
centroid). Functionals compile to sparse weights over interior nodes, so a
whole batch of solutions is evaluated with one matrix product.
"""

import json
import logging
import math
from dataclasses import dataclass
from functools import cached_property, lru_cache
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .random_field import CoefficientField, ConstantCoefficient
from .schemas import Functional, L2Norm, L2NormSquared, LocalAverage, PointValue, PowerOfLinear

logger = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-12

Coefficient = CoefficientField | ConstantCoefficient


class SolverError(RuntimeError):
    """Assembly or linear solve failed; `sample` is the offending row of a batch."""

    def __init__(self, message: str, sample: int | None = None):
        super().__init__(message)
        self.sample = sample


# =============================================================================
# MESHES
# =============================================================================


@dataclass(frozen=True)
class UniformMesh:
    spatial_dim: int
    cells: int

    def __post_init__(self) -> None:
        if self.spatial_dim not in (1, 2):
            raise ValueError(f"spatial_dim must be 1 or 2, got {self.spatial_dim}")
        if self.cells < 1:
            raise ValueError(f"cells must be >= 1, got {self.cells}")

    @property
    def h(self) -> float:
        return 1.0 / self.cells

    @property
    def side(self) -> int:
        return self.cells + 1

    def node_id(self, i: np.ndarray, j: np.ndarray | None = None) -> np.ndarray:
        return i if self.spatial_dim == 1 else i * self.side + j

    @cached_property
    def nodes(self) -> np.ndarray:
        grid = np.arange(self.side) * self.h
        if self.spatial_dim == 1:
            return grid[:, None]
        x, y = np.meshgrid(grid, grid, indexing="ij")
        return np.stack([x.ravel(), y.ravel()], axis=-1)

    @cached_property
    def elements(self) -> np.ndarray:
        if self.spatial_dim == 1:
            left = np.arange(self.cells)
            return np.stack([left, left + 1], axis=-1)
        a, b = np.meshgrid(np.arange(self.cells), np.arange(self.cells), indexing="ij")
        a, b = a.ravel(), b.ravel()
        n00, n10 = self.node_id(a, b), self.node_id(a + 1, b)
        n11, n01 = self.node_id(a + 1, b + 1), self.node_id(a, b + 1)
        lower = np.stack([n00, n10, n11], axis=-1)
        upper = np.stack([n00, n11, n01], axis=-1)
        return np.concatenate([lower, upper], axis=0)

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.elements].mean(axis=1)

    @cached_property
    def areas(self) -> np.ndarray:
        size = self.h if self.spatial_dim == 1 else 0.5 * self.h * self.h
        return np.full(self.elements.shape[0], size)

    @cached_property
    def interior(self) -> np.ndarray:
        index = np.rint(self.nodes * self.cells).astype(np.int64)
        on_boundary = np.any((index == 0) | (index == self.cells), axis=1)
        return np.flatnonzero(~on_boundary)

    @cached_property
    def interior_map(self) -> np.ndarray:
        """Full node id -> interior index, -1 on the boundary."""
        mapping = np.full(self.nodes.shape[0], -1, dtype=np.int64)
        mapping[self.interior] = np.arange(self.interior.size)
        return mapping

    @cached_property
    def local_stiffness(self) -> np.ndarray:
        """(E, d+1, d+1) element stiffness matrices for a unit coefficient."""
        if self.spatial_dim == 1:
            block = np.array([[1.0, -1.0], [-1.0, 1.0]]) / self.h
            return np.broadcast_to(block, (self.cells, 2, 2)).copy()
        vertices = self.nodes[self.elements]
        origin = vertices[:, 0]
        edges = np.stack([vertices[:, 1] - origin, vertices[:, 2] - origin], axis=-1)
        reference = np.array([[-1.0, 1.0, 0.0], [-1.0, 0.0, 1.0]])
        gradients = np.linalg.inv(edges).transpose(0, 2, 1) @ reference
        return self.areas[:, None, None] * np.einsum("eki,ekj->eij", gradients, gradients)

    @cached_property
    def local_mass(self) -> np.ndarray:
        if self.spatial_dim == 1:
            block = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
        else:
            block = (np.ones((3, 3)) + np.eye(3)) / 12.0
        return self.areas[:, None, None] * block

    def _interior_pattern(
        self, local: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, sparse.csr_matrix]:
        """CSR structure of the interior system plus the scatter S with data = S @ a_e."""
        size = self.spatial_dim + 1
        rows = self.interior_map[np.repeat(self.elements, size, axis=1)]
        cols = self.interior_map[np.tile(self.elements, (1, size))]
        owner = np.repeat(np.arange(self.elements.shape[0]), size * size).reshape(rows.shape)
        keep = (rows >= 0) & (cols >= 0)
        m = self.interior.size
        keys = rows[keep] * m + cols[keep]
        unique_keys, inverse = np.unique(keys, return_inverse=True)
        scatter = sparse.csr_matrix(
            (local.reshape(rows.shape)[keep], (inverse.reshape(-1), owner[keep])),
            shape=(unique_keys.size, self.elements.shape[0]),
        )
        indices = (unique_keys % m).astype(np.int32)
        indptr = np.concatenate([[0], np.cumsum(np.bincount(unique_keys // m, minlength=m))])
        return indices, indptr.astype(np.int32), scatter

    @cached_property
    def stiffness_pattern(self) -> tuple[np.ndarray, np.ndarray, sparse.csr_matrix]:
        return self._interior_pattern(self.local_stiffness)

    def stiffness(self, element_coefficients: np.ndarray) -> sparse.csr_matrix:
        indices, indptr, scatter = self.stiffness_pattern
        m = self.interior.size
        return sparse.csr_matrix((scatter @ element_coefficients, indices, indptr), shape=(m, m))

    @cached_property
    def mass(self) -> sparse.csr_matrix:
        indices, indptr, scatter = self._interior_pattern(self.local_mass)
        m = self.interior.size
        return sparse.csr_matrix(
            (scatter @ np.ones(self.elements.shape[0]), indices, indptr), shape=(m, m)
        )

    @cached_property
    def load(self) -> np.ndarray:
        """Interior load vector of f = 1."""
        full = np.zeros(self.nodes.shape[0])
        share = self.areas / (self.spatial_dim + 1)
        np.add.at(full, self.elements, share[:, None])
        return full[self.interior]


@dataclass(frozen=True)
class MeshHierarchy:
    """Uniform meshes with h_k = h0 * eta**(-k), k = 0..K."""

    spatial_dim: int
    h0: float
    eta: int = 2
    K: int = 0

    def __post_init__(self) -> None:
        if self.eta < 2:
            raise ValueError(f"eta must be an integer >= 2, got {self.eta}")
        cells = 1.0 / self.h0
        if not math.isclose(cells, round(cells), rel_tol=0, abs_tol=1e-9):
            raise ValueError(f"1/h0 must be an integer, got h0={self.h0}")

    @property
    def coarse_cells(self) -> int:
        return round(1.0 / self.h0)

    def cells(self, k: int) -> int:
        if k < 0:
            raise ValueError(f"mesh level must be >= 0, got {k}")
        return self.coarse_cells * self.eta**k

    def h(self, k: int) -> float:
        return 1.0 / self.cells(k)

    def mesh(self, k: int) -> UniformMesh:
        return _mesh(self.spatial_dim, self.cells(k))

    def level_of(self, h: float) -> int:
        """Level k with h_k == h."""
        k = round(math.log(self.h0 / h, self.eta))
        if k < 0 or not math.isclose(self.h(k), h, rel_tol=1e-9):
            raise ValueError(f"h={h} is not in the hierarchy h0={self.h0}, eta={self.eta}")
        return k

    @property
    def meshes(self) -> list[UniformMesh]:
        return [self.mesh(k) for k in range(self.K + 1)]


@lru_cache(maxsize=32)
def _mesh(spatial_dim: int, cells: int) -> UniformMesh:
    return UniformMesh(spatial_dim, cells)


# =============================================================================
# SOLVES
# =============================================================================


@dataclass(frozen=True, eq=False)
class FemSolution:
    mesh: UniformMesh
    values: np.ndarray
    level: int | None = None

    def full_values(self) -> np.ndarray:
        full = np.zeros(self.mesh.nodes.shape[0])
        full[self.mesh.interior] = self.values
        return full

    @property
    def energy(self) -> float:
        """a(u, u), equal to the load applied to u for the Galerkin solution."""
        return float(self.mesh.load @ self.values)


def _element_coefficients(coefficient: Coefficient, Y: np.ndarray, mesh: UniformMesh) -> np.ndarray:
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if Y.shape[1] != coefficient.parameter_dimension:
        raise ValueError(
            f"parameters have {Y.shape[1]} entries, coefficient expects "
            f"{coefficient.parameter_dimension}"
        )
    values = coefficient.sampler(mesh.centroids)(Y)
    bad = np.flatnonzero(np.any(~(values > 0), axis=1))
    if bad.size:
        raise SolverError("non-positive coefficient sampled", sample=int(bad[0]))
    return values


def assemble_system(
    coefficient: Coefficient, y: np.ndarray, mesh: UniformMesh
) -> tuple[sparse.csr_matrix, np.ndarray]:
    a = _element_coefficients(coefficient, y, mesh)[0]
    return mesh.stiffness(a), mesh.load


def check_residual(K: sparse.csr_matrix, u: np.ndarray, b: np.ndarray) -> float:
    """Normwise backward error ||K u - b|| / (||K|| ||u|| + ||b||) in the max norm."""
    scale = abs(K).sum(axis=1).max() * np.max(np.abs(u)) + np.max(np.abs(b))
    error = float(np.max(np.abs(K @ u - b)) / scale)
    if not error <= RESIDUAL_TOL:
        raise SolverError(f"linear solve backward error {error:.2e} exceeds {RESIDUAL_TOL:.0e}")
    return error


def assemble_solve(
    coefficient: Coefficient, y: np.ndarray, mesh: UniformMesh, level: int | None = None
) -> FemSolution:
    """Galerkin P1 solution at one parameter vector."""
    if mesh.interior.size == 0:
        return FemSolution(mesh=mesh, values=np.zeros(0), level=level)
    K, b = assemble_system(coefficient, y, mesh)
    u = splu(K.tocsc()).solve(b)
    check_residual(K, u, b)
    return FemSolution(mesh=mesh, values=u, level=level)


def _solve_tridiagonal(a: np.ndarray, h: float) -> np.ndarray:
    """Thomas algorithm over rows: interior 1D solutions for element coefficients a (S, n)."""
    samples, cells = a.shape
    m = cells - 1
    diag = (a[:, :-1] + a[:, 1:]) / h
    off = -a[:, 1:-1] / h
    c = np.empty((samples, max(m - 1, 0)))
    d = np.empty((samples, m))
    d[:, 0] = h / diag[:, 0]
    if m > 1:
        c[:, 0] = off[:, 0] / diag[:, 0]
    for i in range(1, m):
        denom = diag[:, i] - off[:, i - 1] * c[:, i - 1]
        if i < m - 1:
            c[:, i] = off[:, i] / denom
        d[:, i] = (h - off[:, i - 1] * d[:, i - 1]) / denom
    u = np.empty((samples, m))
    u[:, -1] = d[:, -1]
    for i in range(m - 2, -1, -1):
        u[:, i] = d[:, i] - c[:, i] * u[:, i + 1]

    applied = diag * u
    applied[:, :-1] += off * u[:, 1:]
    applied[:, 1:] += off * u[:, :-1]
    row_norm = np.abs(diag)
    row_norm[:, :-1] += np.abs(off)
    row_norm[:, 1:] += np.abs(off)
    scale = row_norm.max(axis=1) * np.abs(u).max(axis=1) + h
    error = np.abs(applied - h).max(axis=1) / scale
    worst = int(np.argmax(error))
    if not error[worst] <= RESIDUAL_TOL:
        raise SolverError(f"tridiagonal backward error {error[worst]:.2e}", sample=worst)
    return u


def solve_batch(coefficient: Coefficient, Y: np.ndarray, mesh: UniformMesh) -> np.ndarray:
    """(S, interior) solutions for the parameter rows of Y."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if mesh.interior.size == 0:
        return np.zeros((Y.shape[0], 0))
    a = _element_coefficients(coefficient, Y, mesh)
    if mesh.spatial_dim == 1:
        return _solve_tridiagonal(a, mesh.h)
    out = np.empty((Y.shape[0], mesh.interior.size))
    b = mesh.load
    for s in range(Y.shape[0]):
        K = mesh.stiffness(a[s])
        out[s] = splu(K.tocsc()).solve(b)
        try:
            check_residual(K, out[s], b)
        except SolverError as exc:
            raise SolverError(str(exc), sample=s) from exc
    return out


# =============================================================================
# FUNCTIONALS
# =============================================================================


def point_weights(mesh: UniformMesh, points: np.ndarray) -> sparse.csr_matrix:
    """(P, nodes) matrix whose rows evaluate a P1 function at `points`."""
    points = np.asarray(points, dtype=float).reshape(-1, mesh.spatial_dim)
    if np.any((points < 0.0) | (points > 1.0)):
        raise ValueError("evaluation points must lie in the closed unit domain")
    scaled = points * mesh.cells
    cell = np.minimum(np.floor(scaled).astype(np.int64), mesh.cells - 1)
    local = scaled - cell
    rows = np.arange(points.shape[0])
    if mesh.spatial_dim == 1:
        i, t = cell[:, 0], local[:, 0]
        columns = np.stack([i, i + 1], axis=-1)
        weights = np.stack([1.0 - t, t], axis=-1)
    else:
        a, b = cell[:, 0], cell[:, 1]
        s, t = local[:, 0], local[:, 1]
        lower = s >= t
        third = np.where(lower, mesh.node_id(a + 1, b), mesh.node_id(a, b + 1))
        columns = np.stack([mesh.node_id(a, b), mesh.node_id(a + 1, b + 1), third], axis=-1)
        weights = np.stack(
            [
                np.where(lower, 1.0 - s, 1.0 - t),
                np.where(lower, t, s),
                np.where(lower, s - t, t - s),
            ],
            axis=-1,
        )
    return sparse.csr_matrix(
        (weights.ravel(), (np.repeat(rows, columns.shape[1]), columns.ravel())),
        shape=(points.shape[0], mesh.nodes.shape[0]),
    )


def _integer_ratio(value: float, what: str) -> int:
    ratio = round(value)
    if ratio < 1 or not math.isclose(value, ratio, rel_tol=0, abs_tol=1e-9):
        raise ValueError(f"{what} is not an integer ({value})")
    return ratio


def _local_average_weights(mesh: UniformMesh, psi: LocalAverage) -> np.ndarray:
    """Full-node weights of |D*|^-1 int_{D*} u, D* the hat support of psi.node."""
    d = mesh.spatial_dim
    node = np.asarray(psi.node, dtype=float)
    if node.shape != (d,):
        raise ValueError(f"local average node needs {d} coordinates")
    width = psi.reference_width
    reference_cells = _integer_ratio(1.0 / width, "1/reference_width")
    for coordinate in node:
        _integer_ratio(coordinate / width, "node / reference_width")
    if np.any(node - width < -1e-12) or np.any(node + width > 1 + 1e-12):
        raise ValueError("D* must lie inside the domain")
    # subdivision fine enough for both the reference mesh and the solution mesh
    if mesh.cells >= reference_cells:
        q = _integer_ratio(mesh.cells / reference_cells, "mesh cells / reference cells")
    else:
        _integer_ratio(reference_cells / mesh.cells, "reference cells / mesh cells")
        q = 1
    r = width / q
    offsets = np.arange(-q, q)

    if d == 1:
        left = node[0] + offsets * r
        segments = np.stack([left, left + r], axis=-1)
        quadrature = point_weights(mesh, segments.ravel())
        weights = np.asarray(quadrature.sum(axis=0)).ravel() * (r / 2)
        return weights / (2 * width)

    a, b = np.meshgrid(offsets, offsets, indexing="ij")
    corner = node + r * np.stack([a.ravel(), b.ravel()], axis=-1)
    step = np.array([[0.0, 0.0], [r, 0.0], [r, r], [0.0, r]])
    lower = corner[:, None, :] + step[[0, 1, 2]]
    upper = corner[:, None, :] + step[[0, 2, 3]]
    triangles = np.concatenate([lower, upper], axis=0)
    u, v = ((triangles.mean(axis=1) - node) / width).T
    inside = (np.abs(u) < 1) & (np.abs(v) < 1) & (np.abs(u - v) < 1)
    vertices = triangles[inside].reshape(-1, 2)
    weights = np.asarray(point_weights(mesh, vertices).sum(axis=0)).ravel() * (0.5 * r * r / 3)
    return weights / (3 * width * width)


@dataclass(frozen=True, eq=False)
class CompiledFunctional:
    """A functional restricted to the interior nodes of one mesh."""

    psi: Functional
    weights: np.ndarray | None = None
    mass: sparse.csr_matrix | None = None

    def apply(self, U: np.ndarray) -> np.ndarray:
        """psi of each row of U (S, interior)."""
        U = np.atleast_2d(U)
        if isinstance(self.psi, L2NormSquared | L2Norm):
            squared = np.einsum("si,si->s", (self.mass @ U.T).T, U)
            return squared if isinstance(self.psi, L2NormSquared) else np.sqrt(squared)
        linear = U @ self.weights
        if isinstance(self.psi, PowerOfLinear):
            return linear**self.psi.q
        return linear


def _linear_weights(mesh: UniformMesh, psi: PointValue | LocalAverage) -> np.ndarray:
    if isinstance(psi, PointValue):
        if len(psi.x) != mesh.spatial_dim:
            raise ValueError(f"point value needs {mesh.spatial_dim} coordinates")
        full = np.asarray(point_weights(mesh, np.asarray(psi.x)).todense()).ravel()
    else:
        full = _local_average_weights(mesh, psi)
    return full[mesh.interior]


@lru_cache(maxsize=64)
def compile_functional(mesh: UniformMesh, psi: Functional) -> CompiledFunctional:
    if isinstance(psi, L2NormSquared | L2Norm):
        return CompiledFunctional(psi=psi, mass=mesh.mass)
    inner = psi.inner if isinstance(psi, PowerOfLinear) else psi
    return CompiledFunctional(psi=psi, weights=_linear_weights(mesh, inner))


def functional_eval(sol: FemSolution, psi: Functional) -> float:
    return float(compile_functional(sol.mesh, psi).apply(sol.values)[0])


def level_difference_sample(
    coefficient: Coefficient, y: np.ndarray, k: int, psi: Functional, hierarchy: MeshHierarchy
) -> float:
    """psi(u_k(y)) - psi(u_{k-1}(y)), with u_{-1} = 0."""
    fine = functional_eval(assemble_solve(coefficient, y, hierarchy.mesh(k), k), psi)
    if k == 0:
        return fine
    coarse = functional_eval(assemble_solve(coefficient, y, hierarchy.mesh(k - 1), k - 1), psi)
    return fine - coarse


def write_solution(sol: FemSolution, path: str | Path) -> Path:
    """CSV of all nodal values (boundary included) plus a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = ["x", "y"][: sol.mesh.spatial_dim] + ["u"]
    table = np.column_stack([sol.mesh.nodes, sol.full_values()])
    np.savetxt(path, table, delimiter=",", header=",".join(columns), comments="", fmt="%.17g")
    sidecar = {
        "d": sol.mesh.spatial_dim,
        "h": sol.mesh.h,
        "level": sol.level,
        "ordering": "lexicographic by (x, y)",
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))
    return path
