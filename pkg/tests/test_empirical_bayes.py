import numpy as np
import pytest
from scipy.stats import norm
from src.empirical_bayes import PriorEstimate, default_sigma, npmle_prior, posterior, summarize_posterior
from src.errors import ConfigError, DataError, NumericalError


def _normal_prior(scale=1.0):
    grid = np.linspace(-6, 6, 2001)
    weights = norm.pdf(grid, scale=scale)
    return PriorEstimate(grid=grid, weights=weights / weights.sum(), sigma=1.0, loglik=np.array([]))


def test_default_sigma_is_robust_scale():
    rng = np.random.default_rng(50)
    z = np.concatenate([rng.standard_normal(100_000), np.full(500, 50.0)])
    assert default_sigma(z) == pytest.approx(1.0, abs=0.03)
    with pytest.raises(NumericalError):
        default_sigma(np.ones(50))


def test_npmle_concentrates_on_degenerate_prior():
    z = np.random.default_rng(51).standard_normal(5000)
    prior = npmle_prior(z, sigma=1.0, max_iter=2000)
    assert prior.weights[np.abs(prior.grid) <= 0.25].sum() >= 0.8
    assert prior.weights.sum() == pytest.approx(1.0)


def test_npmle_log_likelihood_is_monotone():
    rng = np.random.default_rng(52)
    z = rng.choice([-2.0, 0.0, 3.0], 800) + rng.standard_normal(800)
    prior = npmle_prior(z, sigma=1.0)
    trace = prior.loglik
    assert prior.iterations >= 2
    assert np.all(np.diff(trace) >= -1e-8 * np.abs(trace[:-1]))


def test_conjugate_posterior_matches_closed_form():
    post = posterior(_normal_prior(), 2.0, sigma=1.0, alpha=0.2)
    assert post.mean == pytest.approx(1.0, rel=0.02)
    assert 0.8 <= post.hpd_mass <= 0.81
    half_width = norm.ppf(0.9) * np.sqrt(0.5)
    assert post.lower == pytest.approx(1.0 - half_width, abs=0.02)
    assert post.upper == pytest.approx(1.0 + half_width, abs=0.02)


def test_estimated_prior_posterior_mean_in_conjugate_model():
    rng = np.random.default_rng(53)
    z = rng.standard_normal(10_000) + rng.standard_normal(10_000)
    prior = npmle_prior(z, sigma=1.0)
    assert posterior(prior, 2.0).mean == pytest.approx(1.0, abs=0.08)


def test_point_mass_prior():
    prior = PriorEstimate(grid=np.linspace(-2, 2, 5), weights=np.array([0, 0, 1.0, 0, 0]), sigma=1.0,
                          loglik=np.array([]))
    post = posterior(prior, 1.3)
    assert post.mean == 0.0
    assert post.lower == post.upper == 0.0
    np.testing.assert_array_equal(post.hpd, [False, False, True, False, False])


def test_hpd_set_is_highest_density():
    rng = np.random.default_rng(54)
    grid = np.linspace(-3, 3, 60)
    for _ in range(50):
        post = summarize_posterior(grid, rng.dirichlet(np.ones(60)), alpha=0.2)
        assert post.mass[post.hpd].min() >= post.mass[~post.hpd].max()
        assert post.hpd_mass >= 0.8 - 1e-12
        assert post.hpd_mass - post.mass[post.hpd].min() < 0.8


def test_shifted_posterior_moves_interval():
    post = posterior(_normal_prior(), 2.0, sigma=1.0)
    moved = post.shifted(1.5)
    assert moved.mean == pytest.approx(post.mean + 1.5)
    assert moved.lower == pytest.approx(post.lower + 1.5)
    np.testing.assert_array_equal(moved.mass, post.mass)


def test_posterior_errors():
    prior = _normal_prior()
    with pytest.raises(NumericalError):
        posterior(prior, 1e6)
    with pytest.raises(ConfigError):
        posterior(prior, 0.0, sigma=-1.0)
    with pytest.raises(ConfigError):
        summarize_posterior(prior.grid, prior.weights, alpha=1.5)
    with pytest.raises(DataError):
        npmle_prior(np.arange(10.0), sigma=1.0)
    with pytest.raises(ConfigError):
        npmle_prior(np.random.default_rng(55).standard_normal(100), sigma=-1.0)
