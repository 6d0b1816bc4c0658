import numpy as np
import pytest
from src.dataset import CsvSchema, Dataset, FunnelConfig, load_csv, replicate_pair, simulate_funnel
from src.errors import ConfigError, DataError


def _write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_funnel_default_layout(funnel):
    assert funnel.n == 3565
    assert funnel.p == 1
    assert int(np.sum(funnel.truth != 0)) == 15
    assert set(np.unique(funnel.x[funnel.truth != 0, 0])) == {30.0, 31.0, 32.0}
    np.testing.assert_allclose(funnel.truth[funnel.truth != 0], 4.49)
    assert np.unique(funnel.x).size == 71


def test_funnel_sigma_at_grid_edge():
    config = FunnelConfig()
    assert config.sigma(30) == pytest.approx(0.7186, abs=1e-4)
    assert config.sigma(100) == pytest.approx(100 / 21 - 0.71)


def test_funnel_without_signals():
    data = simulate_funnel(FunnelConfig(signals_per_location=0, seed=3))
    assert data.n == 3550
    assert not np.any(data.truth)


def test_funnel_is_deterministic_per_seed():
    first = simulate_funnel(FunnelConfig(seed=7))
    second = simulate_funnel(FunnelConfig(seed=7))
    other = simulate_funnel(FunnelConfig(seed=8))
    np.testing.assert_array_equal(first.z, second.z)
    np.testing.assert_array_equal(first.x, other.x)
    assert not np.array_equal(first.z, other.z)


def test_funnel_null_spread_matches_sigma():
    config = FunnelConfig()
    checks, failures = 0, 0
    for seed in range(20):
        data = simulate_funnel(FunnelConfig(seed=seed))
        for x in config.grid:
            rows = (data.x[:, 0] == x) & (data.truth == 0)
            sigma = config.sigma(x)
            se = sigma / np.sqrt(2 * (rows.sum() - 1))
            checks += 1
            failures += abs(np.std(data.z[rows], ddof=1) - sigma) > 5 * se
    assert checks == 20 * 71
    assert failures == 0


def test_funnel_rejects_non_positive_sigma():
    with pytest.raises(ConfigError, match="Non-positive sigma"):
        simulate_funnel(FunnelConfig(sigma_intercept=-2.0))


def test_funnel_config_json_round_trip():
    config = FunnelConfig(signal_locations=(40, 41), seed=11)
    assert FunnelConfig.from_json(config.to_json()) == config
    with pytest.raises(ConfigError):
        FunnelConfig.from_json('{"not_a_field": 1}')


def test_replicate_pair_shares_truth():
    first, second = replicate_pair(FunnelConfig(), 1, 2)
    np.testing.assert_array_equal(first.truth, second.truth)
    np.testing.assert_array_equal(first.x, second.x)
    assert not np.array_equal(first.z, second.z)
    with pytest.raises(ConfigError):
        replicate_pair(FunnelConfig(), 5, 5)


def test_dataset_invariants():
    with pytest.raises(DataError):
        Dataset(x=[1.0], z=[0.0])
    with pytest.raises(DataError):
        Dataset(x=[1.0, 2.0, 3.0], z=[0.0, 1.0])
    with pytest.raises(DataError):
        Dataset(x=[1.0, 2.0], z=[0.0, np.nan])
    data = Dataset(x=[1.0, 2.0], z=[0.5, -0.5])
    assert data.covariate_names == ("x1",)
    with pytest.raises(ValueError):
        data.z[0] = 3.0


def test_subset_and_with_z_keep_design():
    data = Dataset(x=[[1.0], [2.0], [3.0]], z=[0.1, 0.2, 0.3], labels=("a", "b", "c"))
    part = data.subset(np.array([True, False, True]))
    assert part.ids == ("a", "c")
    shifted = data.with_z(data.z - 1)
    np.testing.assert_array_equal(shifted.x, data.x)
    np.testing.assert_allclose(shifted.z, [-0.9, -0.8, -0.7])


def test_load_csv_preserves_row_order(tmp_path):
    path = _write(tmp_path, "id,age,z\nr1,30,0.5\nr2,20,-1.25\nr3,40,2\n")
    data = load_csv(path)
    assert data.n == 3
    assert data.covariate_names == ("age",)
    assert data.ids == ("r1", "r2", "r3")
    np.testing.assert_array_equal(data.z, [0.5, -1.25, 2.0])
    np.testing.assert_array_equal(data.x[:, 0], [30, 20, 40])


def test_load_csv_custom_score_column(tmp_path):
    path = _write(tmp_path, "age,tot,note\n30,0.5,young\n20,-1,young\n")
    data = load_csv(path, CsvSchema(z_column="tot"))
    assert data.covariate_names == ("age",)
    np.testing.assert_array_equal(data.z, [0.5, -1.0])


def test_load_csv_skips_provenance_comment(tmp_path):
    path = _write(tmp_path, '# {"seed": 1}\nx,z\n1,2\n3,oops\n')
    with pytest.raises(DataError, match="line 4"):
        load_csv(path)


def test_load_csv_reports_bad_cell(tmp_path):
    path = _write(tmp_path, "x,z\n1,0.5\n2,abc\n")
    with pytest.raises(DataError, match=r"line 3, column 'z'"):
        load_csv(path)


def test_load_csv_errors(tmp_path):
    with pytest.raises(DataError, match="empty"):
        load_csv(_write(tmp_path, "", "empty.csv"))
    with pytest.raises(DataError, match="no records"):
        load_csv(_write(tmp_path, "x,z\n", "header.csv"))
    with pytest.raises(DataError, match="Missing score column"):
        load_csv(_write(tmp_path, "x,y\n1,2\n2,3\n", "noz.csv"))
    with pytest.raises(DataError, match="Ragged"):
        load_csv(_write(tmp_path, "x,z\n1,2\n3,4,5\n6,7\n", "ragged.csv"))
    with pytest.raises(DataError, match="not found"):
        load_csv(str(tmp_path / "missing.csv"))
