"""Shared fixtures: a manufactured sample model and a throwaway reference cache."""

from collections import Counter
from collections.abc import Callable
from dataclasses import dataclass, field

import logfire
import numpy as np
import pytest

from src.database import make_session_factory
from src.schemas import GridKind


def smooth_part(Y: np.ndarray) -> np.ndarray:
    """E = 1.1 under the uniform density; integrated exactly by any level >= 1 grid."""
    return 1.0 + 0.3 * Y[:, 0] ** 2 + 0.1 * Y[:, 0] * Y[:, -1]


def linear_part(Y: np.ndarray) -> np.ndarray:
    return 1.0 + 0.5 * Y[:, 0]


@dataclass(eq=False)
class ManufacturedModel:
    """psi(u_{h_k}(y)) = f(y) + c h_k**alpha g(y), no PDE solves.

    Satisfies the SampleModel protocol. `calls[k]` counts the samples requested
    on level k.
    """

    parameter_dimension: int = 2
    spatial_dim: int = 1
    h0: float = 0.5
    eta: int = 2
    grid_kind: GridKind = GridKind.SMOLYAK
    grid_weights: tuple[float, ...] | None = None
    alpha: float = 2.0
    c: float = 0.01
    f: Callable[[np.ndarray], np.ndarray] = smooth_part
    g: Callable[[np.ndarray], np.ndarray] = linear_part
    calls: Counter = field(default_factory=Counter)

    def mesh_width(self, k: int) -> float:
        return self.h0 * self.eta ** (-k)

    def functional_samples(self, Y: np.ndarray, k: int, psi) -> np.ndarray:
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        self.calls[k] += Y.shape[0]
        return self.f(Y) + self.c * self.mesh_width(k) ** self.alpha * self.g(Y)

    def describe(self) -> dict:
        return {
            "kind": "manufactured",
            "N": self.parameter_dimension,
            "h0": self.h0,
            "alpha": self.alpha,
            "c": self.c,
        }


@pytest.fixture(scope="session", autouse=True)
def quiet_logfire():
    logfire.configure(send_to_logfire=False, console=False)


@pytest.fixture
def model() -> ManufacturedModel:
    return ManufacturedModel()


@pytest.fixture
def cache(tmp_path):
    """Session factory on a fresh SQLite file."""
    return make_session_factory(f"sqlite:///{tmp_path / 'cache.db'}")
