import numpy as np
import pytest
from src.errors import ConfigError, DataError, NumericalError
from src.lp_basis import build_basis, empirical_cdf, rank_lookup


def test_empirical_cdf_examples():
    np.testing.assert_allclose(empirical_cdf([1, 2, 3]), [1 / 3, 2 / 3, 1])
    np.testing.assert_allclose(empirical_cdf([1, 1, 2]), [0.5, 0.5, 1])
    with pytest.raises(DataError):
        empirical_cdf([])


def test_first_basis_function_on_three_points():
    basis = build_basis(np.array([1.0, 2.0, 3.0]), m=1)
    np.testing.assert_allclose(basis.values[:, 0], [-1.2247, 0.0, 1.2247], atol=1e-4)


@pytest.mark.parametrize("n", [50, 500, 5000])
@pytest.mark.parametrize("m", range(2, 9))
def test_basis_is_orthonormal(n, m):
    z = np.random.default_rng(n + m).standard_normal(n)
    basis = build_basis(z, m)
    values = basis.values
    np.testing.assert_allclose(values.mean(axis=0), 0.0, atol=1e-8)
    np.testing.assert_allclose(values.T @ values / n, np.eye(m), atol=1e-6)


def test_polynomial_degrees():
    basis = build_basis(np.random.default_rng(0).standard_normal(300), 4)
    assert np.all(basis.leading_coefficients != 0)
    for j in range(4):
        assert not np.any(basis.coefficients[j, j + 2:])


def test_basis_depends_only_on_ranks():
    z = np.random.default_rng(1).standard_normal(400)
    np.testing.assert_array_equal(build_basis(z, 5).values, build_basis(np.exp(z), 5).values)


def test_evaluate_matches_sample_values():
    z = np.random.default_rng(2).standard_normal(250)
    basis = build_basis(z, 6)
    np.testing.assert_allclose(basis.evaluate(z), basis.values, atol=1e-8)
    assert basis.evaluate(float(z[0])).shape == (6,)


def test_median_point_is_centred():
    z = np.random.default_rng(3).standard_normal(1001)
    basis = build_basis(z, 3)
    assert abs(basis.evaluate(float(np.median(z)))[0]) < 2 / np.sqrt(z.size)


def test_out_of_sample_points_are_clamped():
    z = np.random.default_rng(4).standard_normal(200)
    basis = build_basis(z, 3)
    n = z.size
    np.testing.assert_allclose(basis.evaluate(z.min() - 10), basis.evaluate_u(0.5 / n)[0])
    np.testing.assert_allclose(basis.evaluate(z.max() + 10), basis.evaluate_u(1 - 0.5 / n)[0])


def test_rank_lookup_uses_midranks_for_ties():
    sorted_values = np.array([1.0, 1.0, 2.0, 5.0])
    np.testing.assert_allclose(rank_lookup(sorted_values, [1.0, 2.0, 3.0]), [1.5 / 4, 3 / 4, 3 / 4])


def test_basis_errors():
    with pytest.raises(ConfigError):
        build_basis(np.arange(10.0), 0)
    with pytest.raises(NumericalError, match="Rank deficiency"):
        build_basis(np.array([1.0, 1.0, 2.0, 2.0, 3.0]), 3)
