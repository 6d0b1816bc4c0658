import json
import os
from dataclasses import dataclass, asdict, replace
from typing import Optional, Tuple, List, Sequence
import numpy as np
import pandas as pd
from src.config import Z_COLUMN, TRUTH_COLUMN, LABEL_COLUMN
from src.errors import ConfigError, DataError
from src.rng import derive_stream
from src.logger import get_logger

# Configure logging
logger = get_logger(__name__)


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    Paired records (x_i, z_i) 📊

    x is an (N, p) covariate matrix, z the N scores, truth the optional
    simulation effect sizes and labels optional row identifiers.
    """
    x: np.ndarray
    z: np.ndarray
    truth: Optional[np.ndarray] = None
    labels: Optional[Tuple[str, ...]] = None
    covariate_names: Tuple[str, ...] = ()

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        z = np.asarray(self.z, dtype=float).reshape(-1)
        if x.ndim != 2:
            raise DataError(f"Covariates must form a matrix, got {x.ndim} dimensions")
        if x.shape[0] != z.shape[0]:
            raise DataError(f"x has {x.shape[0]} rows but z has {z.shape[0]}")
        if z.shape[0] < 2:
            raise DataError(f"A dataset needs at least 2 records, got {z.shape[0]}")
        if x.shape[1] < 1:
            raise DataError("A dataset needs at least one covariate column")
        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(z)):
            raise DataError("Dataset contains non-finite entries")
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "z", _frozen(z))
        if self.truth is not None:
            truth = np.asarray(self.truth, dtype=float).reshape(-1)
            if truth.shape[0] != z.shape[0]:
                raise DataError(f"truth has {truth.shape[0]} entries, expected {z.shape[0]}")
            if not np.all(np.isfinite(truth)):
                raise DataError("truth contains non-finite entries")
            object.__setattr__(self, "truth", _frozen(truth))
        if self.labels is not None:
            labels = tuple(str(label) for label in self.labels)
            if len(labels) != z.shape[0]:
                raise DataError(f"labels has {len(labels)} entries, expected {z.shape[0]}")
            object.__setattr__(self, "labels", labels)
        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise DataError(f"{len(names)} covariate names for {x.shape[1]} columns")
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return int(self.z.shape[0])

    @property
    def p(self) -> int:
        return int(self.x.shape[1])

    @property
    def ids(self) -> Tuple[str, ...]:
        return self.labels if self.labels is not None else tuple(str(i + 1) for i in range(self.n))

    def with_z(self, z: np.ndarray) -> "Dataset":
        """Same design and truth, new scores (used for regression-adjusted y)."""
        return replace(self, z=np.asarray(z, dtype=float))

    def subset(self, mask: np.ndarray) -> "Dataset":
        mask = np.asarray(mask)
        labels = None if self.labels is None else tuple(np.asarray(self.labels, dtype=object)[mask])
        truth = None if self.truth is None else self.truth[mask]
        return Dataset(x=self.x[mask], z=self.z[mask], truth=truth, labels=labels,
                       covariate_names=self.covariate_names)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({LABEL_COLUMN: list(self.ids)})
        for j, name in enumerate(self.covariate_names):
            frame[name] = self.x[:, j]
        frame[Z_COLUMN] = self.z
        if self.truth is not None:
            frame[TRUTH_COLUMN] = self.truth
        return frame


@dataclass(frozen=True)
class FunnelConfig:
    """Generator for the heteroscedastic funnel: z_i ~ N(theta_i, sigma(x_i)^2)."""
    x_min: int = 30
    x_max: int = 100
    nulls_per_x: int = 50
    signal_locations: Tuple[int, ...] = (30, 31, 32)
    signals_per_location: int = 5
    signal_theta: float = 4.49
    sigma_slope: float = 1 / 21
    sigma_intercept: float = -0.71
    seed: int = 1

    def __post_init__(self):
        object.__setattr__(self, "signal_locations", tuple(int(v) for v in self.signal_locations))

    @property
    def grid(self) -> np.ndarray:
        return np.arange(self.x_min, self.x_max + 1, dtype=float)

    @property
    def total(self) -> int:
        return (self.x_max - self.x_min + 1) * self.nulls_per_x + len(self.signal_locations) * self.signals_per_location

    def sigma(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) * self.sigma_slope + self.sigma_intercept

    def validate(self) -> None:
        if self.x_max < self.x_min:
            raise ConfigError(f"x_max ({self.x_max}) is below x_min ({self.x_min})")
        if self.nulls_per_x < 0 or self.signals_per_location < 0:
            raise ConfigError("Record counts must be non-negative")
        sigmas = self.sigma(self.grid)
        if np.any(sigmas <= 0):
            bad = self.grid[sigmas <= 0]
            raise ConfigError(f"Non-positive sigma on the grid at x={bad.tolist()}")
        outside = [loc for loc in self.signal_locations if loc < self.x_min or loc > self.x_max]
        if outside:
            raise ConfigError(f"Signal locations outside the grid: {outside}")
        if self.total < 2:
            raise ConfigError("Funnel configuration produces fewer than 2 records")

    def to_json(self) -> str:
        payload = asdict(self)
        payload["signal_locations"] = list(self.signal_locations)
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FunnelConfig":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Funnel config is not valid JSON: {e}") from e
        unknown = set(payload) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown funnel config fields: {sorted(unknown)}")
        return cls(**payload)


def simulate_funnel(config: FunnelConfig) -> Dataset:
    """
    Simulate the funnel dataset.

    Rows are laid out by x; at each grid x the nulls come first, then that
    location's signals. The layout depends only on the config, never the seed.
    """
    try:
        logger.debug(f"Simulating funnel data with seed {config.seed}")
        config.validate()
        xs: List[float] = []
        thetas: List[float] = []
        for x in config.grid:
            xs.extend([x] * config.nulls_per_x)
            thetas.extend([0.0] * config.nulls_per_x)
            if int(x) in config.signal_locations:
                xs.extend([x] * config.signals_per_location)
                thetas.extend([config.signal_theta] * config.signals_per_location)
        x = np.asarray(xs)
        theta = np.asarray(thetas)
        rng = derive_stream(config.seed, "funnel").generator
        z = theta + config.sigma(x) * rng.standard_normal(x.shape[0])
        labels = tuple(f"case{i + 1}" for i in range(x.shape[0]))
        dataset = Dataset(x=x.reshape(-1, 1), z=z, truth=theta, labels=labels, covariate_names=("x",))
        logger.info({"n": dataset.n, "signals": int(np.sum(theta != 0)), "seed": config.seed, "message": "Funnel data simulated"})
        return dataset
    except ConfigError as e:
        logger.error({"error": str(e), "message": "Invalid funnel configuration"})
        raise


def replicate_pair(config: FunnelConfig, seed1: int, seed2: int) -> Tuple[Dataset, Dataset]:
    """Two independent replications of the same funnel model."""
    if seed1 == seed2:
        logger.error({"seed": seed1, "message": "Replication seeds must differ"})
        raise ConfigError(f"Replications need distinct seeds, got {seed1} twice")
    first = simulate_funnel(replace(config, seed=int(seed1)))
    second = simulate_funnel(replace(config, seed=int(seed2)))
    logger.info({"seeds": [seed1, seed2], "message": "Replication pair simulated"})
    return first, second


@dataclass(frozen=True)
class CsvSchema:
    """Column roles for CSV ingestion; covariates=None means every other numeric column."""
    z_column: str = Z_COLUMN
    covariates: Optional[Sequence[str]] = None
    truth_column: str = TRUTH_COLUMN
    label_column: str = LABEL_COLUMN


def _leading_comments(path: str) -> int:
    """Number of provenance lines (starting with '#') above the header."""
    count = 0
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if not line.startswith("#"):
                break
            count += 1
    return count


def _numeric_column(frame: pd.DataFrame, column: str, offset: int = 0) -> np.ndarray:
    values = pd.to_numeric(frame[column].str.strip(), errors="coerce")
    bad = values.isna() | ~np.isfinite(values.fillna(0.0))
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        cell = frame[column].iloc[row]
        # header is line 1
        raise DataError(f"Non-numeric cell {cell!r} at line {row + offset + 2}, column '{column}'")
    return values.to_numpy(dtype=float)


def load_csv(path: str, schema: Optional[CsvSchema] = None) -> Dataset:
    """
    Parse a header-first CSV into a Dataset, preserving row order.
    Errors carry the offending line and column.
    """
    schema = schema or CsvSchema()
    try:
        logger.debug(f"Loading dataset from {path}")
        if not os.path.exists(path):
            raise DataError(f"File not found: {path}")
        try:
            offset = _leading_comments(path)
            frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8", skipinitialspace=True,
                                skiprows=offset)
        except pd.errors.EmptyDataError as e:
            raise DataError(f"{path} is empty") from e
        except pd.errors.ParserError as e:
            raise DataError(f"Ragged row in {path}: {e}") from e
        frame.columns = [str(c).strip() for c in frame.columns]
        if frame.shape[0] == 0:
            raise DataError(f"{path} has a header but no records")
        if frame.isna().any().any():
            row, col = np.argwhere(frame.isna().to_numpy())[0]
            raise DataError(f"Ragged row at line {row + offset + 2}: missing column '{frame.columns[col]}'")
        if schema.z_column not in frame.columns:
            raise DataError(f"Missing score column '{schema.z_column}' in {path}")
        reserved = {schema.z_column, schema.truth_column, schema.label_column}
        if schema.covariates:
            covariates = list(schema.covariates)
            missing = [c for c in covariates if c not in frame.columns]
            if missing:
                raise DataError(f"Missing covariate columns {missing} in {path}")
        else:
            # text-only columns are annotations, not covariates
            covariates = [c for c in frame.columns if c not in reserved
                          and pd.to_numeric(frame[c].str.strip(), errors="coerce").notna().any()]
        if not covariates:
            raise DataError(f"No covariate columns found in {path}")

        z = _numeric_column(frame, schema.z_column, offset)
        x = np.column_stack([_numeric_column(frame, c, offset) for c in covariates])
        truth = _numeric_column(frame, schema.truth_column, offset) if schema.truth_column in frame.columns else None
        labels = tuple(frame[schema.label_column]) if schema.label_column in frame.columns else None
        dataset = Dataset(x=x, z=z, truth=truth, labels=labels, covariate_names=tuple(covariates))
        logger.info({"path": path, "n": dataset.n, "p": dataset.p, "message": "Dataset loaded"})
        return dataset
    except DataError as e:
        logger.error({"error": str(e), "message": f"Failed to load dataset from {path}"})
        raise
