import math

import numpy as np
import pytest
from scipy.integrate import trapezoid

from src.random_field import (
    CoefficientField,
    ConstantCoefficient,
    eigen_1d,
    eigen_2d,
    eval_coefficient,
    kl_expansion,
    normalization_constant,
    solve_transcendental,
)


def test_roots_solve_the_eigenvalue_equation():
    roots = solve_transcendental(30)
    for n, w in enumerate(roots, start=1):
        assert (n - 1) * math.pi < w < n * math.pi
        assert abs(math.sin(w) * (w * w - 1.0) - 2.0 * w * math.cos(w)) < 1e-9 * w * w


def test_solve_transcendental_rejects_empty_request():
    with pytest.raises(ValueError):
        solve_transcendental(0)


def test_eigenvalues_decrease_and_exhaust_the_trace():
    expansion = eigen_1d(200)
    assert np.all(np.diff(expansion.eigenvalues) < 0)
    # the trace of exp(-|x - x'|) on (0,1) is 1
    assert 0.99 < expansion.eigenvalues.sum() < 1.0


def test_eigenfunctions_are_orthonormal():
    expansion = eigen_1d(4)
    x = np.linspace(0.0, 1.0, 20001)
    b = expansion.eigenfunctions(x)
    gram = trapezoid(b[:, :, None] * b[:, None, :], x, axis=0)
    np.testing.assert_allclose(gram, np.eye(4), atol=1e-6)


def test_eigenpairs_satisfy_the_integral_equation():
    expansion = eigen_1d(3)
    s = np.linspace(0.0, 1.0, 20001)
    b = expansion.eigenfunctions(s)
    for x in (0.0, 0.3, 0.75):
        kernel = np.exp(-np.abs(x - s))
        applied = trapezoid(kernel[:, None] * b, s, axis=0)
        np.testing.assert_allclose(
            applied, expansion.eigenvalues * expansion.eigenfunctions(np.array([x]))[0], atol=1e-6
        )


def test_normalization_constant_rejects_nonpositive_frequency():
    assert normalization_constant(1.3) > 0
    with pytest.raises(ValueError):
        normalization_constant(0.0)


def test_2d_eigenpairs_are_sorted_products():
    expansion = eigen_2d(10)
    lam = expansion.one_d.eigenvalues
    assert expansion.pairs[0].tolist() == [1, 1]
    # symmetric ties keep lexicographic order
    assert expansion.pairs[1].tolist() == [1, 2]
    assert expansion.pairs[2].tolist() == [2, 1]
    assert np.all(np.diff(expansion.eigenvalues) <= 0)
    i, j = expansion.pairs[:, 0] - 1, expansion.pairs[:, 1] - 1
    np.testing.assert_allclose(expansion.eigenvalues, lam[i] * lam[j], rtol=1e-15)


def test_2d_eigenfunctions_are_separable_products():
    expansion = eigen_2d(6)
    x = np.array([[0.2, 0.7], [0.5, 0.5]])
    b = expansion.eigenfunctions(x)
    one_d = expansion.one_d
    for m, (i, j) in enumerate(expansion.pairs):
        expected = (
            one_d.eigenfunctions(x[:, 0])[:, i - 1] * one_d.eigenfunctions(x[:, 1])[:, j - 1]
        )
        np.testing.assert_allclose(b[:, m], expected, rtol=1e-14)


def test_2d_pool_too_small():
    with pytest.raises(ValueError):
        eigen_2d(20, M1=4)


def test_kl_expansion_dispatch():
    assert kl_expansion(1, 5).N == 5
    assert kl_expansion(2, 5).spatial_dim == 2
    with pytest.raises(ValueError):
        kl_expansion(3, 5)


def test_coefficient_field_samples():
    field = CoefficientField(eigen_1d(5), base_shift=0.5)
    x = np.linspace(0.0, 1.0, 11)
    Y = np.random.default_rng(0).uniform(-1, 1, size=(4, 5))
    values = field.sampler(x)(Y)
    assert values.shape == (4, 11)
    assert np.all(values > 0.5)
    np.testing.assert_allclose(values[2], eval_coefficient(field, Y[2], x), rtol=1e-15)
    np.testing.assert_allclose(field.sampler(x)(np.zeros((1, 5))), 1.5, rtol=1e-15)


def test_eval_coefficient_checks_dimension():
    field = CoefficientField(eigen_1d(3))
    with pytest.raises(ValueError):
        eval_coefficient(field, np.zeros(4), np.array([0.5]))


def test_constant_coefficient():
    coefficient = ConstantCoefficient(2.0, spatial_dim=2, parameter_dimension=3)
    values = eval_coefficient(coefficient, np.zeros(3), np.array([[0.1, 0.2], [0.3, 0.4]]))
    np.testing.assert_array_equal(values, [2.0, 2.0])
    assert coefficient.describe()["kind"] == "constant"
