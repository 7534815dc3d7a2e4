import numpy as np
import pytest

from src.allocation import fit_loglog
from src.estimators import (
    CostModel,
    build_surrogate,
    cancellation_groups,
    design_for,
    error_split,
    mc_estimate,
    mesh_level_of,
    mlmc_estimate,
    mlsc_estimate,
    parameter_stream,
    reference_value,
    slsc_estimate,
)
from src.fem import compile_functional
from src.problem import EllipticProblem, SampleEvaluationError
from src.random_field import CoefficientField, ConstantCoefficient, eigen_1d
from src.schemas import EstimatorMethod, LevelPlan, PointValue
from src.sparse_grid import expectation, quadrature
from tests.conftest import ManufacturedModel

MIDPOINT = PointValue(x=(0.5,))


@pytest.fixture
def elliptic() -> EllipticProblem:
    return EllipticProblem(CoefficientField(eigen_1d(3)), h0=0.5, workers=1)


def _plan(grid_levels: list[int]) -> LevelPlan:
    K = len(grid_levels) - 1
    return LevelPlan(K=K, grid_levels=grid_levels, sample_counts=[1] * (K + 1))


# =============================================================================
# STOCHASTIC COLLOCATION
# =============================================================================


def test_slsc_integrates_the_manufactured_model_exactly(model):
    report = slsc_estimate(model, 0, 1, MIDPOINT)
    np.testing.assert_allclose(report.value, 1.1 + 0.01 * 0.25, rtol=1e-14)
    assert report.method == EstimatorMethod.SLSC
    assert report.total_solve_count == 5
    assert report.total_model_cost == 5 * 2.0


def test_cancellation_groups():
    assert cancellation_groups([3, 3, 2, 2, 2, 1]) == [(0, 1), (2, 4), (5, 5)]
    assert cancellation_groups([4]) == [(0, 0)]
    assert cancellation_groups([2, 1, 0]) == [(0, 0), (1, 1), (2, 2)]


def test_mlsc_on_one_grid_telescopes_to_single_level(elliptic):
    mlsc = mlsc_estimate(elliptic, _plan([2, 2, 2]), MIDPOINT, group_cancellations=False)
    slsc = slsc_estimate(elliptic, 2, 2, MIDPOINT)
    np.testing.assert_allclose(mlsc.value, slsc.value, rtol=1e-12)


def test_grouped_and_ungrouped_sums_agree(elliptic):
    plan = _plan([2, 2, 1])
    grouped = mlsc_estimate(elliptic, plan, MIDPOINT)
    ungrouped = mlsc_estimate(elliptic, plan, MIDPOINT, group_cancellations=False)
    np.testing.assert_allclose(grouped.value, ungrouped.value, rtol=1e-12)
    assert grouped.total_model_cost == ungrouped.total_model_cost
    assert grouped.total_solve_count < ungrouped.total_solve_count
    assert grouped.per_level[0].grouped_into == 1
    assert grouped.per_level[0].contribution == 0.0


def test_grouping_skips_interior_solves(model):
    plan = _plan([1, 1, 1])
    grouped = mlsc_estimate(model, plan, MIDPOINT)
    assert dict(model.calls) == {2: 5}
    model.calls.clear()
    ungrouped = mlsc_estimate(model, plan, MIDPOINT, group_cancellations=False)
    assert dict(model.calls) == {0: 10, 1: 10, 2: 5}
    np.testing.assert_allclose(grouped.value, ungrouped.value, rtol=1e-14)
    np.testing.assert_allclose(grouped.value, 1.1 + 0.01 * 0.125**2, rtol=1e-14)


def test_mlsc_cost_bookkeeping(model):
    # N = 2 Smolyak grids: 13 points on level 2, 5 on level 1; C_k = h_k**-1
    report = mlsc_estimate(model, _plan([2, 1]), MIDPOINT)
    assert report.total_model_cost == 13 * 2.0 + 5 * 4.0
    assert report.total_solve_count == 13 + 2 * 5
    assert report.solve_cost == 13 * 2.0 + 5 * (4.0 + 2.0)
    scaled = mlsc_estimate(model, _plan([2, 1]), MIDPOINT, cost=CostModel(C_c=3.0, gamma=2.0))
    assert scaled.total_model_cost == 3.0 * (13 * 4.0 + 5 * 16.0)


def test_mlsc_rejects_increasing_grid_levels(model):
    plan = LevelPlan.model_construct(K=1, grid_levels=[1, 2], sample_counts=[5, 13])
    with pytest.raises(ValueError, match="non-increasing"):
        mlsc_estimate(model, plan, MIDPOINT)


def test_sample_failures_are_located():
    problem = EllipticProblem(ConstantCoefficient(-1.0), h0=0.5, workers=1, chunk_size=2)
    with pytest.raises(SampleEvaluationError) as excinfo:
        slsc_estimate(problem, 1, 0, MIDPOINT)
    assert excinfo.value.level == 1
    assert excinfo.value.sample == 0


def test_memoized_batches_are_bounded():
    problem = EllipticProblem(CoefficientField(eigen_1d(3)), h0=0.5, workers=1, cache_entries=2)
    first, second, third = (parameter_stream(1, level, 4, 3) for level in range(3))
    kept = problem.functional_samples(first, 1, MIDPOINT)
    dropped = problem.functional_samples(second, 1, MIDPOINT)
    assert problem.functional_samples(first, 1, MIDPOINT) is kept
    problem.functional_samples(third, 1, MIDPOINT)
    assert problem.cached_batches == 2
    assert problem.functional_samples(first, 1, MIDPOINT) is kept
    again = problem.functional_samples(second, 1, MIDPOINT)
    assert again is not dropped
    np.testing.assert_array_equal(again, dropped)
    with pytest.raises(ValueError, match="cache_entries"):
        EllipticProblem(CoefficientField(eigen_1d(3)), h0=0.5, workers=1, cache_entries=0)


def test_surrogate_expectation_matches_quadrature(elliptic):
    surrogate = build_surrogate(elliptic, 1, 2)
    weights = compile_functional(elliptic.mesh(1), MIDPOINT).weights
    np.testing.assert_allclose(
        expectation(surrogate) @ weights, slsc_estimate(elliptic, 1, 2, MIDPOINT).value, rtol=1e-12
    )
    design = design_for(elliptic, 2)
    np.testing.assert_allclose(
        quadrature(design, surrogate.values @ weights), expectation(surrogate) @ weights, rtol=1e-12
    )


# =============================================================================
# MONTE CARLO BASELINES
# =============================================================================


def test_parameter_stream_prefix_and_independence():
    long = parameter_stream(7, 2, 10, 3)
    np.testing.assert_array_equal(parameter_stream(7, 2, 4, 3), long[:4])
    assert np.all(np.abs(long) <= 1.0)
    assert not np.array_equal(parameter_stream(7, 1, 10, 3), long)
    assert not np.array_equal(parameter_stream(8, 2, 10, 3), long)


def test_mc_is_reproducible(model):
    first = mc_estimate(model, 1, 200, 11, MIDPOINT)
    second = mc_estimate(model, 1, 200, 11, MIDPOINT)
    assert first.value == second.value
    assert first.seed == 11
    assert first.per_level[0].variance > 0
    assert abs(first.value - 1.1) < 0.05
    with pytest.raises(ValueError):
        mc_estimate(model, 1, 0, 11, MIDPOINT)


def test_mlmc_with_given_samples(model):
    report = mlmc_estimate(model, 1, MIDPOINT, 3, samples=[50, 20])
    assert report.method == EstimatorMethod.MLMC
    assert [entry.points for entry in report.per_level] == [50, 20]
    assert report.total_solve_count == 50 + 2 * 20
    assert abs(report.value - (1.1 + 0.01 * 0.25**2)) < 0.08
    # level differences of the manufactured model are c (h_1^2 - h_0^2) g(y)
    assert abs(report.per_level[1].contribution + 0.01 * (0.25 - 0.0625)) < 1e-3


def test_mlmc_sizes_levels_from_pilot(model):
    report = mlmc_estimate(model, 2, MIDPOINT, 5, eps=1e-2, pilot=20)
    counts = [entry.points for entry in report.per_level]
    assert all(count >= 20 for count in counts)
    assert counts[0] >= counts[1] >= counts[2]


def test_mc_error_decays_like_one_over_root_m():
    linear = ManufacturedModel(f=lambda Y: Y.sum(axis=1), g=lambda Y: np.zeros(len(Y)))
    sizes = [100, 316, 1000, 3162, 10000]
    # E = 0, so each value is its own error
    rms = []
    for M in sizes:
        values = [mc_estimate(linear, 0, M, seed, MIDPOINT).value for seed in range(64)]
        rms.append(np.sqrt(np.mean(np.square(values))))
    slope, _ = fit_loglog(sizes, rms)
    assert abs(slope + 0.5) <= 0.1


@pytest.mark.slow
def test_level_difference_variance_decays_like_h_to_the_fourth():
    problem = EllipticProblem(CoefficientField(eigen_1d(20)), h0=0.25, workers=1)
    report = mlmc_estimate(problem, 6, PointValue(x=(0.75,)), 2, samples=[200] * 7)
    fine = report.per_level[3:]
    widths = [problem.mesh_width(entry.k) for entry in fine]
    slope, _ = fit_loglog(widths, [entry.variance for entry in fine])
    assert abs(slope - 4.0) <= 0.5


def test_mlmc_argument_errors(model):
    with pytest.raises(ValueError):
        mlmc_estimate(model, 1, MIDPOINT, 0)
    with pytest.raises(ValueError):
        mlmc_estimate(model, 1, MIDPOINT, 0, eps=1e-2, pilot=1)
    with pytest.raises(ValueError):
        mlmc_estimate(model, 1, MIDPOINT, 0, samples=[10])


# =============================================================================
# REFERENCE VALUES AND ERROR SPLITS
# =============================================================================


def test_mesh_level_of(model):
    assert mesh_level_of(model, 0.125) == 2
    with pytest.raises(ValueError):
        mesh_level_of(model, 0.2)


def test_reference_value_is_cached(model, cache):
    first = reference_value(model, 0.125, 2, MIDPOINT, session_factory=cache)
    requested = sum(model.calls.values())
    second = reference_value(model, 0.125, 2, MIDPOINT, session_factory=cache)
    assert second == first
    assert sum(model.calls.values()) == requested
    np.testing.assert_allclose(first, 1.1 + 0.01 * 0.125**2, rtol=1e-14)


def test_reference_value_without_cache(model):
    reference_value(model, 0.25, 1, MIDPOINT, session_factory=None)
    reference_value(model, 0.25, 1, MIDPOINT, session_factory=None)
    assert model.calls[1] == 2 * 5


def test_error_split(model):
    reference = reference_value(model, 0.125, 2, MIDPOINT, session_factory=None)
    estimate = slsc_estimate(model, 1, 1, MIDPOINT).value
    interp, spatial = error_split(model, 1, 2, estimate, reference, MIDPOINT, relative=False)
    assert interp < 1e-14
    np.testing.assert_allclose(spatial, 0.01 * (0.0625 - 0.015625), rtol=1e-10)
    _, relative = error_split(model, 1, 2, estimate, reference, MIDPOINT)
    np.testing.assert_allclose(relative, spatial / reference, rtol=1e-12)
