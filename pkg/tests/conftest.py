import os
import tempfile

os.environ.setdefault("LASER_LOG_FILE", os.path.join(tempfile.gettempdir(), "laser-tests.log"))

import numpy as np
import pytest
from src.config import get_fixture_path
from src.dataset import CsvSchema, Dataset, FunnelConfig, load_csv, simulate_funnel
from src.lp_basis import build_basis
from src.relevance import RelevanceModel, fit_relevance


def _fixture_or_skip(name: str, schema: CsvSchema) -> Dataset:
    path = get_fixture_path(name)
    if not os.path.exists(path):
        pytest.skip(f"real-data fixture {name} not found (set LASER_FIXTURE_DIR)")
    return load_csv(path, schema)


@pytest.fixture(scope="session")
def funnel() -> Dataset:
    return simulate_funnel(FunnelConfig(seed=1))


@pytest.fixture(scope="session")
def funnel_model(funnel) -> RelevanceModel:
    return fit_relevance(funnel)


@pytest.fixture(scope="session")
def homogeneous() -> Dataset:
    """z independent of x."""
    rng = np.random.default_rng(2024)
    x = rng.integers(1, 101, 2000).astype(float)
    return Dataset(x=x, z=rng.standard_normal(2000))


@pytest.fixture
def flat_model(homogeneous) -> RelevanceModel:
    return RelevanceModel.from_coefficients(build_basis(homogeneous.z, 6), np.zeros(6))


@pytest.fixture(scope="session")
def kidney() -> Dataset:
    return _fixture_or_skip("kidney.csv", CsvSchema(z_column="tot", covariates=["age"]))


@pytest.fixture(scope="session")
def dti() -> Dataset:
    return _fixture_or_skip("dti.csv", CsvSchema(z_column="z", covariates=["x1", "x2"]))


@pytest.fixture(scope="session")
def dti_univariate() -> Dataset:
    return _fixture_or_skip("dti.csv", CsvSchema(z_column="z", covariates=["x1"]))
