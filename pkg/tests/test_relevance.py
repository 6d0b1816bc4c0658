from concurrent.futures import ThreadPoolExecutor
import numpy as np
import pytest
from scipy.integrate import trapezoid
from scipy.stats import norm
from src.dataset import Dataset
from src.errors import ConfigError, DataError, NumericalError
from src.lp_basis import build_basis
from src.relevance import (
    UNIT_GRID, RelevanceModel, bootstrap_relevance, cust, fit_relevance, n_rel, relevance_density,
    relevance_table,
)


@pytest.fixture
def basis3():
    return build_basis(np.random.default_rng(10).standard_normal(1000), 3)


def test_relevance_density_has_unit_integral(basis3):
    model = RelevanceModel.from_coefficients(basis3, [0.17, 0.13, 0.08])
    grid = (np.arange(1000) + 0.5) / 1000
    values = relevance_density(model, 0.0, grid)
    assert trapezoid(values, grid) == pytest.approx(1.0, abs=1e-8)
    assert np.all(values >= 0)


def test_zero_coefficients_give_flat_density(basis3):
    model = RelevanceModel.from_coefficients(basis3, np.zeros(3))
    assert model.is_flat(5.0)
    np.testing.assert_array_equal(model.density(5.0, UNIT_GRID), np.ones_like(UNIT_GRID))
    assert model.cust(5.0) == 0.0
    assert model.n_rel(5.0, 3565) == 3565


def test_cust_and_relevant_sample_size(basis3):
    first = RelevanceModel.from_coefficients(basis3, [0.17, 0.13, 0.08])
    second = RelevanceModel.from_coefficients(basis3, [0.24, 0.11, 0.08])
    assert cust(first, 0.0) == pytest.approx(0.0522, abs=1e-10)
    assert cust(second, 0.0) == pytest.approx(0.0761, abs=1e-10)
    assert n_rel(first, 0.0, 7661) == pytest.approx(7280.9, abs=0.1)
    with pytest.raises(ConfigError):
        n_rel(first, 0.0, 0)


def test_relevant_sample_size_shrinks_with_cust(basis3):
    sizes = [RelevanceModel.from_coefficients(basis3, [c, 0.0, 0.0]).n_rel(0.0) for c in (0.1, 0.3, 0.6, 1.0)]
    assert np.all(np.diff(sizes) < 0)
    assert sizes[0] < basis3.n


def test_floored_density_stays_normalized(basis3):
    model = RelevanceModel.from_coefficients(basis3, [3.0, 0.0, 0.0])
    values = model.density(0.0, UNIT_GRID)
    assert np.any(model.floor_reached(0.0, UNIT_GRID))
    assert np.all(values > 0)
    assert trapezoid(values, UNIT_GRID) == pytest.approx(1.0, abs=1e-8)


def test_local_density_integrates_to_one(basis3):
    model = RelevanceModel.from_coefficients(basis3, [0.17, 0.13, 0.08])
    z = np.linspace(-8, 8, 40001)
    local = norm.pdf(z) * model.density(0.0, norm.cdf(z))
    assert trapezoid(local, z) == pytest.approx(1.0, abs=1e-6)


def test_cdf_is_monotone(basis3):
    model = RelevanceModel.from_coefficients(basis3, [0.5, -0.2, 0.1])
    values = model.cdf(0.0, UNIT_GRID)
    assert values[0] == 0.0
    assert values[-1] == pytest.approx(1.0)
    assert np.all(np.diff(values) >= 0)


def test_concurrent_callers_share_one_cached_value(basis3):
    model = RelevanceModel.from_coefficients(basis3, [0.5, -0.2, 0.1])
    with ThreadPoolExecutor(max_workers=8) as pool:
        cdfs = list(pool.map(lambda _: model.grid_cdf(0.0), range(32)))
        samples = list(pool.map(lambda _: model.sample_density(0.0), range(32)))
        maxima = list(pool.map(lambda _: model.max_relevance(0.0), range(32)))
    assert all(cdf is model.grid_cdf(0.0) for cdf in cdfs)
    assert all(sample is model.sample_density(0.0) for sample in samples)
    assert len(set(maxima)) == 1


def test_independent_covariate_is_nearly_flat():
    rng = np.random.default_rng(11)
    data = Dataset(x=rng.integers(1, 101, 3000).astype(float), z=rng.standard_normal(3000))
    model = fit_relevance(data)
    for x0 in (25.0, 50.0, 75.0):
        assert model.cust(x0) < 0.05


def test_funnel_relevance_departs_from_uniform(funnel_model):
    deviation = np.max(np.abs(funnel_model.density(30, UNIT_GRID) - 1.0))
    assert deviation > 0.2
    assert funnel_model.cust(30) > 0
    assert funnel_model.n_rel(30) < 3565


def test_relevance_invariant_to_covariate_ranks():
    rng = np.random.default_rng(12)
    x = rng.integers(1, 101, 1500).astype(float)
    z = rng.normal(scale=0.5 + x / 50)
    first = fit_relevance(Dataset(x=x, z=z))
    transformed = np.exp(x / 20)
    second = fit_relevance(Dataset(x=transformed, z=z))
    row = int(np.flatnonzero(x == 40.0)[0])
    np.testing.assert_allclose(first.coefficients(40.0), second.coefficients(transformed[row]), atol=1e-10)


def test_binary_covariate_matches_propensity_ratio():
    rng = np.random.default_rng(13)
    n = 20000
    x = rng.integers(0, 2, n).astype(float)
    z = x + rng.standard_normal(n)
    model = fit_relevance(Dataset(x=x, z=z))
    u = np.argsort(np.argsort(z)) / n
    bins = np.minimum((u * 20).astype(int), 19)
    ratio = np.array([x[bins == b].mean() for b in range(20)]) / x.mean()
    estimate = model.density(1.0, (np.arange(20) + 0.5) / 20)
    assert np.mean(np.abs(estimate - ratio)) <= 0.1


def _linear_tilt_sample(rng, n):
    """u | x has density 1 + c(2u - 1) with c = (2x - 1)/2, so only LP_{1|x} depends on x."""
    x = rng.uniform(0, 1, n)
    c = (2 * x - 1) / 2
    w = rng.uniform(0, 1, n)
    safe = np.where(np.abs(c) < 1e-12, 1.0, c)
    u = np.where(np.abs(c) < 1e-12, w, (-(1 - c) + np.sqrt((1 - c) ** 2 + 4 * c * w)) / (2 * safe))
    return Dataset(x=x, z=u)


@pytest.mark.slow
def test_bic_selects_only_the_first_component():
    rng = np.random.default_rng(17)
    first_kept = 0
    higher_dropped = np.zeros(5, dtype=int)
    for _ in range(100):
        terms = fit_relevance(_linear_tilt_sample(rng, 3565)).selected_terms()
        first_kept += bool(terms[1])
        higher_dropped += [not terms[j] for j in range(2, 7)]
    assert first_kept == 100
    assert np.all(higher_dropped >= 90)


def test_unselected_selector_keeps_every_term():
    rng = np.random.default_rng(14)
    x = rng.uniform(0, 1, 1000)
    data = Dataset(x=x, z=2 * x + rng.standard_normal(1000))
    bic = fit_relevance(data, m=4)
    full = fit_relevance(data, m=4, selector="none")
    assert "x1:T1" in bic.selected_terms()[1]
    assert all(len(terms) == len(full.fitter.x_basis.column_names) - 1 for terms in full.selected_terms().values())
    assert full.threshold == 0.0


def test_knn_fitter_gives_valid_density(funnel):
    model = fit_relevance(funnel, fitter="knn")
    values = model.density(30, UNIT_GRID)
    assert trapezoid(values, UNIT_GRID) == pytest.approx(1.0, abs=1e-8)
    assert not model.is_flat(30)


def test_relevance_table_rows(funnel_model):
    table = relevance_table(funnel_model, [30, 60, 100])
    assert list(table.columns) == ["x", "cust", "rel", "n_rel", "status"]
    np.testing.assert_allclose(table["rel"], 1 / (1 + table["cust"]))
    np.testing.assert_allclose(table["n_rel"], 3565 * table["rel"])


def test_fit_errors():
    rng = np.random.default_rng(15)
    small = Dataset(x=rng.uniform(size=30), z=rng.standard_normal(30))
    with pytest.raises(DataError):
        fit_relevance(small)
    x = rng.uniform(size=500)
    twins = Dataset(x=np.column_stack([x, x]), z=rng.standard_normal(500))
    with pytest.raises(NumericalError, match="collinear"):
        fit_relevance(twins)
    with pytest.raises(ConfigError):
        fit_relevance(Dataset(x=x, z=rng.standard_normal(500)), selector="cv")


def test_bootstrap_needs_two_replicates(homogeneous):
    with pytest.raises(ConfigError):
        bootstrap_relevance(homogeneous, 50.0, B=1)


def test_bootstrap_band_covers_uniform_under_independence():
    rng = np.random.default_rng(16)
    data = Dataset(x=rng.integers(1, 101, 1000).astype(float), z=rng.standard_normal(1000))
    bands = bootstrap_relevance(data, 50.0, B=20, seed=3)
    covered = (bands.lower <= 1 + 1e-9) & (bands.upper >= 1 - 1e-9)
    assert covered.mean() >= 0.9
    assert bands.replicates + bands.skipped == 20


def test_bootstrap_is_reproducible(homogeneous):
    first = bootstrap_relevance(homogeneous, 50.0, B=5, seed=9)
    second = bootstrap_relevance(homogeneous, 50.0, B=5, seed=9)
    np.testing.assert_array_equal(first.lower, second.lower)
    np.testing.assert_array_equal(first.sd, second.sd)
