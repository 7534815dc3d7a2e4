import json

import numpy as np
import pytest

from src.fem import (
    RESIDUAL_TOL,
    MeshHierarchy,
    SolverError,
    UniformMesh,
    assemble_solve,
    assemble_system,
    check_residual,
    compile_functional,
    functional_eval,
    level_difference_sample,
    point_weights,
    solve_batch,
    write_solution,
)
from src.random_field import CoefficientField, ConstantCoefficient, eigen_1d, eigen_2d
from src.schemas import L2Norm, L2NormSquared, LocalAverage, PointValue, PowerOfLinear

UNIT_1D = ConstantCoefficient(1.0)
UNIT_2D = ConstantCoefficient(1.0, spatial_dim=2)


# =============================================================================
# MESHES
# =============================================================================


def test_mesh_counts():
    mesh = UniformMesh(2, 4)
    assert mesh.nodes.shape == (25, 2)
    assert mesh.elements.shape == (32, 3)
    assert mesh.interior.size == 9
    np.testing.assert_allclose(mesh.areas.sum(), 1.0)
    assert UniformMesh(1, 8).interior.size == 7


def test_local_matrices():
    mesh = UniformMesh(2, 3)
    np.testing.assert_allclose(mesh.local_stiffness.sum(axis=2), 0.0, atol=1e-12)
    np.testing.assert_allclose(mesh.local_mass.sum(), 1.0, rtol=1e-14)
    assert np.all(np.linalg.eigvalsh(mesh.local_stiffness) > -1e-12)


def test_mesh_rejects_bad_sizes():
    with pytest.raises(ValueError):
        UniformMesh(3, 4)
    with pytest.raises(ValueError):
        UniformMesh(1, 0)


def test_hierarchy():
    hierarchy = MeshHierarchy(1, 0.25, eta=2, K=3)
    assert [mesh.cells for mesh in hierarchy.meshes] == [4, 8, 16, 32]
    assert hierarchy.level_of(1 / 16) == 2
    with pytest.raises(ValueError):
        hierarchy.level_of(0.3)
    with pytest.raises(ValueError):
        MeshHierarchy(1, 0.3)
    with pytest.raises(ValueError):
        MeshHierarchy(1, 0.5, eta=1)


# =============================================================================
# SOLVES
# =============================================================================


def test_1d_unit_coefficient_is_nodally_exact():
    mesh = UniformMesh(1, 16)
    u = solve_batch(UNIT_1D, np.zeros((1, 1)), mesh)[0]
    x = mesh.nodes[mesh.interior, 0]
    np.testing.assert_allclose(u, x * (1 - x) / 2, atol=1e-12)


def test_tridiagonal_batch_matches_sparse_direct_solve():
    field = CoefficientField(eigen_1d(4))
    mesh = UniformMesh(1, 32)
    Y = np.random.default_rng(3).uniform(-1, 1, size=(5, 4))
    batch = solve_batch(field, Y, mesh)
    for s, y in enumerate(Y):
        np.testing.assert_allclose(batch[s], assemble_solve(field, y, mesh).values, rtol=1e-10)


def test_2d_unit_coefficient_solution_is_symmetric():
    mesh = UniformMesh(2, 8)
    solution = assemble_solve(UNIT_2D, np.zeros(1), mesh)
    full = solution.full_values().reshape(9, 9)
    np.testing.assert_allclose(full, full.T, atol=1e-13)
    assert np.all(solution.values > 0)
    assert solution.energy > 0
    np.testing.assert_allclose(
        solve_batch(UNIT_2D, np.zeros((2, 1)), mesh), np.tile(solution.values, (2, 1)), atol=1e-14
    )


def test_2d_center_value_converges_quadratically():
    center = PointValue(x=(0.5, 0.5))
    values = [
        functional_eval(assemble_solve(UNIT_2D, np.zeros(1), UniformMesh(2, cells)), center)
        for cells in (8, 16, 32, 64)
    ]
    differences = np.abs(np.diff(values))
    ratios = differences[:-1] / differences[1:]
    assert np.all((ratios > 3.0) & (ratios < 5.0))


def test_nonpositive_coefficient_names_the_sample():
    with pytest.raises(SolverError) as excinfo:
        solve_batch(ConstantCoefficient(-1.0), np.zeros((3, 1)), UniformMesh(1, 4))
    assert excinfo.value.sample == 0


def test_coarsest_mesh_without_interior_nodes():
    assert solve_batch(UNIT_1D, np.zeros((2, 1)), UniformMesh(1, 1)).shape == (2, 0)


@pytest.mark.parametrize(
    "field, cells", [(CoefficientField(eigen_1d(6)), 64), (CoefficientField(eigen_2d(6)), 16)]
)
def test_unit_load_gives_positive_solutions(field, cells):
    Y = np.random.default_rng(8).uniform(-1, 1, size=(4, field.parameter_dimension))
    U = solve_batch(field, Y, UniformMesh(field.spatial_dim, cells))
    assert np.all(U > 0)


@pytest.mark.parametrize("coefficient", [UNIT_1D, UNIT_2D])
def test_energy_grows_under_refinement(coefficient):
    # nested P1 spaces: a(u_h, u_h) = (1, u_h) increases towards a(u, u)
    energies = [
        assemble_solve(coefficient, np.zeros(1), UniformMesh(coefficient.spatial_dim, 2**k)).energy
        for k in range(1, 6)
    ]
    assert np.all(np.diff(energies) > 0)


def test_backward_error_check():
    assert RESIDUAL_TOL == 1e-12
    K, b = assemble_system(UNIT_1D, np.zeros(1), UniformMesh(1, 16))
    u = np.linalg.solve(K.toarray(), b)
    assert check_residual(K, u, b) <= RESIDUAL_TOL
    with pytest.raises(SolverError, match="backward error"):
        check_residual(K, u * (1 + 1e-6), b)


# =============================================================================
# FUNCTIONALS
# =============================================================================


def test_point_weights_interpolate_linear_functions():
    mesh = UniformMesh(2, 4)
    points = np.array([[0.3, 0.7], [0.9, 0.1], [0.5, 0.5], [1.0, 1.0]])
    nodal = mesh.nodes[:, 0] + 2 * mesh.nodes[:, 1]
    np.testing.assert_allclose(
        point_weights(mesh, points) @ nodal, points[:, 0] + 2 * points[:, 1], atol=1e-14
    )
    with pytest.raises(ValueError):
        point_weights(mesh, np.array([[1.2, 0.5]]))


@pytest.mark.parametrize(
    "cells,psi",
    [
        (4, LocalAverage(node=(0.5, 0.5), reference_width=1 / 256)),
        (16, LocalAverage(node=(0.5, 0.5), reference_width=1 / 8)),
        (16, LocalAverage(node=(0.25, 0.5), reference_width=1 / 8)),
        (8, LocalAverage(node=(0.5, 0.5), reference_width=1 / 16)),
    ],
)
def test_local_average_of_constant_is_one(cells, psi):
    weights = compile_functional(UniformMesh(2, cells), psi).weights
    np.testing.assert_allclose(weights.sum(), 1.0, rtol=1e-12)
    assert np.all(weights >= 0)


def test_local_average_of_linear_function_is_its_center_value():
    mesh = UniformMesh(2, 16)
    psi = LocalAverage(node=(0.5, 0.25), reference_width=1 / 8)
    nodal = 1.0 + mesh.nodes[:, 0] - 3 * mesh.nodes[:, 1]
    weights = compile_functional(mesh, psi).weights
    np.testing.assert_allclose(weights @ nodal[mesh.interior], 0.75, rtol=1e-12)

    line = UniformMesh(1, 16)
    x = line.nodes[line.interior, 0]
    one_d = compile_functional(line, LocalAverage(node=(0.5,), reference_width=0.125))
    np.testing.assert_allclose(one_d.weights @ (2 * x - 0.3), 0.7, rtol=1e-12)


def test_local_average_rejects_misaligned_support():
    with pytest.raises(ValueError):
        compile_functional(UniformMesh(2, 8), LocalAverage(node=(0.3, 0.5), reference_width=1 / 8))
    with pytest.raises(ValueError):
        compile_functional(UniformMesh(2, 8), LocalAverage(node=(0.5,), reference_width=1 / 8))


def test_nonlinear_functionals():
    mesh = UniformMesh(1, 64)
    solution = assemble_solve(UNIT_1D, np.zeros(1), mesh)
    point = functional_eval(solution, PointValue(x=(0.5,)))
    np.testing.assert_allclose(point, 0.125, atol=1e-12)
    cube = functional_eval(solution, PowerOfLinear(inner=PointValue(x=(0.5,)), q=3))
    np.testing.assert_allclose(cube, 0.125**3, rtol=1e-12)
    squared = functional_eval(solution, L2NormSquared())
    np.testing.assert_allclose(squared, 1 / 120, rtol=1e-2)
    np.testing.assert_allclose(functional_eval(solution, L2Norm()), np.sqrt(squared), rtol=1e-14)


def test_level_difference_sample_telescopes():
    field = CoefficientField(eigen_2d(3))
    hierarchy = MeshHierarchy(2, 0.25, K=2)
    psi = PointValue(x=(0.5, 0.5))
    y = np.array([0.3, -0.2, 0.9])
    total = sum(level_difference_sample(field, y, k, psi, hierarchy) for k in range(3))
    direct = functional_eval(assemble_solve(field, y, hierarchy.mesh(2)), psi)
    np.testing.assert_allclose(total, direct, rtol=1e-12)


def test_write_solution(tmp_path):
    solution = assemble_solve(UNIT_2D, np.zeros(1), UniformMesh(2, 4), level=0)
    path = write_solution(solution, tmp_path / "u.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "x,y,u"
    assert len(lines) == 26
    sidecar = json.loads(path.with_suffix(".json").read_text())
    assert sidecar["d"] == 2 and sidecar["h"] == 0.25
