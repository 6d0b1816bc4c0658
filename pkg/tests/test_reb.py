import numpy as np
import pytest
from src.dataset import Dataset
from src.errors import ConfigError
from src.reb import finite_bayes_ci, global_eb_inference, reb_inference, theta_grid


def _constant_design(seed, n=400):
    rng = np.random.default_rng(seed)
    theta = rng.choice([0.0, 0.0, 0.0, 2.5], n)
    return Dataset(x=np.full(n, 7.0), z=theta + rng.standard_normal(n), truth=theta)


def test_theta_grid_widens_range():
    y = np.random.default_rng(80).standard_normal(500)
    grid = theta_grid(y)
    assert grid.size == 200
    assert grid[0] < y.min() and grid[-1] > y.max()


def test_reb_reduces_to_global_eb_when_flat():
    data = _constant_design(81)
    local = reb_inference(data, 7.0, 2.0, seed=1, bags=1)
    overall = global_eb_inference(data, 2.0, 7.0, adjust=True)
    assert local.flat
    np.testing.assert_array_equal(local.prior.weights, overall.prior.weights)
    assert local.posterior_z.mean == pytest.approx(overall.posterior_z.mean, abs=1e-12)
    assert local.posterior_z.lower == pytest.approx(overall.posterior_z.lower, abs=1e-12)
    assert local.posterior_z.upper == pytest.approx(overall.posterior_z.upper, abs=1e-12)


def test_reb_bags_average_identical_flat_draws():
    data = _constant_design(82)
    single = reb_inference(data, 7.0, 2.0, seed=1, bags=1)
    bagged = reb_inference(data, 7.0, 2.0, seed=1, bags=3)
    assert bagged.bags == 3
    np.testing.assert_allclose(bagged.posterior_y.mass, single.posterior_y.mass, rtol=1e-12)


def test_reb_posterior_on_both_scales():
    data = _constant_design(83)
    result = reb_inference(data, 7.0, 3.0, seed=2, bags=2)
    assert result.posterior_z.mean == pytest.approx(result.posterior_y.mean + result.shift)
    assert result.y0 == pytest.approx(3.0 - result.shift)
    assert result.posterior_y.lower <= result.posterior_y.mean <= result.posterior_y.upper
    assert result.posterior_y.hpd_mass >= 0.8 - 1e-12


def test_reb_is_reproducible():
    rng = np.random.default_rng(84)
    x = rng.integers(1, 6, 1500).astype(float)
    data = Dataset(x=x, z=(0.5 + 0.3 * x) * rng.standard_normal(1500))
    first = reb_inference(data, 1.0, 1.5, seed=9, bags=3)
    second = reb_inference(data, 1.0, 1.5, seed=9, bags=3)
    np.testing.assert_array_equal(first.posterior_y.mass, second.posterior_y.mass)


def test_reb_validation():
    data = _constant_design(85)
    with pytest.raises(ConfigError):
        reb_inference(data, 7.0, np.inf)
    with pytest.raises(ConfigError):
        reb_inference(data, 7.0, 1.0, bags=0)
    with pytest.raises(ConfigError):
        global_eb_inference(data, 1.0, adjust=True)


def test_global_eb_without_adjustment():
    data = _constant_design(86)
    result = global_eb_inference(data, 3.0)
    assert result.shift == 0.0
    assert result.posterior_z.mean == result.posterior_y.mean
    assert 0.0 < result.posterior_y.mean < 3.0


def test_finite_bayes_minimal_cycles():
    data = _constant_design(87, n=300)
    result = finite_bayes_ci(data, 7.0, 2.0, B=2, seed=3)
    assert result.cycles + result.failures == 2
    assert result.averaged.mass.sum() == pytest.approx(1.0)
    lower, upper = result.interval
    assert lower <= upper
    assert result.single.mass.sum() == pytest.approx(1.0)
    again = finite_bayes_ci(data, 7.0, 2.0, B=2, seed=3)
    np.testing.assert_array_equal(again.averaged.mass, result.averaged.mass)
    with pytest.raises(ConfigError):
        finite_bayes_ci(data, 7.0, 2.0, B=1)


@pytest.mark.slow
def test_finite_bayes_interval_is_not_narrower():
    averaged, single = 0.0, 0.0
    for seed in range(10):
        data = _constant_design(200 + seed, n=300)
        result = finite_bayes_ci(data, 7.0, 2.0, B=30, seed=seed)
        averaged += result.interval[1] - result.interval[0]
        single += result.single.upper - result.single.lower
    assert averaged >= single


@pytest.mark.slow
def test_funnel_reb_uses_narrower_noise_scale(funnel):
    local = reb_inference(funnel, 30, 4.49, seed=1, bags=3, adjust=False)
    overall = global_eb_inference(funnel, 4.49)
    assert not local.flat
    assert local.sigma < overall.sigma
    assert local.posterior_z.mass.sum() == pytest.approx(1.0)


@pytest.mark.slow
def test_funnel_case_effect_sizes(funnel):
    case_a = reb_inference(funnel, 30, 4.49, seed=1)
    case_b = reb_inference(funnel, 60, 4.49, seed=1)
    overall = global_eb_inference(funnel, 4.49)
    assert case_a.posterior_z.mean > overall.posterior_z.mean
    assert case_b.posterior_z.mean < 1.0
    assert case_a.posterior_z.lower > 0.0
    assert case_b.posterior_z.lower <= 0.0 <= case_b.posterior_z.upper
