"""Parameterized elliptic problem producing functional samples level by level."""

import hashlib
import json
import logging
import os
from collections import OrderedDict
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import logfire
import numpy as np

from .fem import (
    Coefficient,
    MeshHierarchy,
    SolverError,
    UniformMesh,
    compile_functional,
    solve_batch,
)
from .schemas import Functional, GridKind

logger = logging.getLogger(__name__)

DEFAULT_CHUNK = 256
DEFAULT_CACHE_ENTRIES = 64


class SampleEvaluationError(RuntimeError):
    """A sample could not be evaluated; carries the mesh level and sample index."""

    def __init__(self, level: int, sample: int | None, reason: str):
        where = f"sample {sample}" if sample is not None else "unknown sample"
        super().__init__(f"level {level}, {where}: {reason}")
        self.level = level
        self.sample = sample


@runtime_checkable
class SampleModel(Protocol):
    """Anything that returns psi(u_{h_k}(y)) for a batch of parameter points."""

    parameter_dimension: int
    spatial_dim: int
    h0: float
    eta: int
    grid_kind: GridKind
    grid_weights: tuple[float, ...] | None

    def mesh_width(self, k: int) -> float: ...

    def functional_samples(self, Y: np.ndarray, k: int, psi: Functional) -> np.ndarray: ...

    def describe(self) -> dict: ...


def problem_hash(description: dict) -> str:
    """SHA-256 of the canonical JSON form of `description`."""
    canonical = json.dumps(description, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()


def default_workers() -> int:
    return max(1, int(os.getenv("MLSC_WORKERS", "1")))


def _evaluate_chunk(
    coefficient: Coefficient, mesh: UniformMesh, Y: np.ndarray, psi: Functional | None
) -> np.ndarray:
    solutions = solve_batch(coefficient, Y, mesh)
    if psi is None:
        return solutions
    return compile_functional(mesh, psi).apply(solutions)


@dataclass(eq=False)
class EllipticProblem:
    """-div(a(y, .) grad u) = 1 on (0,1)^d with a P1 hierarchy h_k = h0 eta**(-k)."""

    coefficient: Coefficient
    h0: float
    eta: int = 2
    grid_kind: GridKind = GridKind.SMOLYAK
    grid_weights: tuple[float, ...] | None = None
    workers: int = field(default_factory=default_workers)
    chunk_size: int = DEFAULT_CHUNK
    memoize: bool = True
    cache_entries: int = DEFAULT_CACHE_ENTRIES
    _cache: OrderedDict = field(default_factory=OrderedDict, init=False, repr=False)

    def __post_init__(self) -> None:
        if self.cache_entries < 1:
            raise ValueError(f"cache_entries must be >= 1, got {self.cache_entries}")
        self.hierarchy = MeshHierarchy(self.coefficient.spatial_dim, self.h0, self.eta)
        if self.grid_weights is not None:
            self.grid_weights = tuple(self.grid_weights)

    @property
    def parameter_dimension(self) -> int:
        return self.coefficient.parameter_dimension

    @property
    def spatial_dim(self) -> int:
        return self.coefficient.spatial_dim

    def mesh(self, k: int) -> UniformMesh:
        return self.hierarchy.mesh(k)

    def mesh_width(self, k: int) -> float:
        return self.hierarchy.h(k)

    def describe(self) -> dict:
        return {
            "coefficient": self.coefficient.describe(),
            "h0": self.h0,
            "eta": self.eta,
            "grid_kind": self.grid_kind.value,
            "grid_weights": self.grid_weights,
        }

    def _run(self, Y: np.ndarray, k: int, psi: Functional | None) -> np.ndarray:
        mesh = self.mesh(k)
        starts = range(0, Y.shape[0], self.chunk_size)
        blocks = [Y[start : start + self.chunk_size] for start in starts]
        parts = [np.zeros((0,) if psi is not None else (0, mesh.interior.size))]
        if self.workers > 1 and len(blocks) > 1:
            with ProcessPoolExecutor(max_workers=self.workers) as pool:
                futures = [
                    pool.submit(_evaluate_chunk, self.coefficient, mesh, block, psi)
                    for block in blocks
                ]
                for start, future in zip(starts, futures):
                    try:
                        parts.append(future.result())
                    except SolverError as exc:
                        raise _located(exc, k, start) from exc
        else:
            for start, block in zip(starts, blocks):
                try:
                    parts.append(_evaluate_chunk(self.coefficient, mesh, block, psi))
                except SolverError as exc:
                    raise _located(exc, k, start) from exc
        return np.concatenate(parts, axis=0)

    def solve_samples(self, Y: np.ndarray, k: int) -> np.ndarray:
        """(S, interior) nodal solutions on mesh level k."""
        Y = self._check(Y)
        with logfire.span("solve {samples} samples on level {level}", samples=len(Y), level=k):
            return self._run(Y, k, None)

    def functional_samples(self, Y: np.ndarray, k: int, psi: Functional) -> np.ndarray:
        """psi(u_{h_k}(y)) for each row y of Y."""
        Y = self._check(Y)
        key = None
        if self.memoize:
            key = (k, psi, hashlib.sha1(np.ascontiguousarray(Y).tobytes()).hexdigest())
            if key in self._cache:
                self._cache.move_to_end(key)
                return self._cache[key]
        with logfire.span(
            "functional samples level {level}", level=k, samples=len(Y), workers=self.workers
        ):
            values = self._run(Y, k, psi)
        logger.debug("level %d: %d samples evaluated", k, len(Y))
        if key is not None:
            self._cache[key] = values
            while len(self._cache) > self.cache_entries:
                self._cache.popitem(last=False)
        return values

    @property
    def cached_batches(self) -> int:
        return len(self._cache)

    def _check(self, Y: np.ndarray | Sequence) -> np.ndarray:
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        if Y.shape[1] != self.parameter_dimension:
            raise ValueError(
                f"parameter rows have {Y.shape[1]} entries, expected {self.parameter_dimension}"
            )
        return Y


def _located(exc: SolverError, level: int, offset: int) -> SampleEvaluationError:
    sample = offset + exc.sample if exc.sample is not None else None
    return SampleEvaluationError(level, sample, str(exc))
