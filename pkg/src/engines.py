from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, Optional, Tuple, Union
import numpy as np
import pandas as pd
import statsmodels.api as sm
from numpy.polynomial import legendre as L
from scipy import optimize
from scipy.integrate import trapezoid
from scipy.stats import norm
from src.config import (
    LINDSEY_BINS, LINDSEY_DEGREE, LINDSEY_TAIL, NULL_WINDOW, MIN_LOCFDR_N, MIN_LINDSEY_N, FDR_GRID_SIZE,
    LOCFDR_THRESHOLD_CAP, LOCFDR_WINDOW_N, ENGINES, IQR_TO_SD,
)
from src.errors import ConfigError, DataError, NumericalError
from src.logger import get_logger

# Configure logging
logger = get_logger(__name__)

EVALUATION_POINTS = 2001

NullWindow = Union[str, Tuple[float, float]]


def _finite_sample(z, minimum: int, what: str) -> np.ndarray:
    z = np.asarray(z, dtype=float).reshape(-1)
    if not np.all(np.isfinite(z)):
        raise DataError(f"{what} needs finite scores")
    if z.size < minimum:
        raise DataError(f"{what} needs at least {minimum} scores, got {z.size}")
    return z


@dataclass(frozen=True, eq=False)
class LindseyDensity:
    """
    Marginal density from a Poisson regression of histogram counts 📈

    log f is a Legendre series in the bin center mapped onto [-1, 1]; outside
    the binned range the density is held at its boundary value.
    """
    edges: np.ndarray
    counts: np.ndarray
    coefficients: np.ndarray
    low: float
    high: float
    total_mass: float
    grid: np.ndarray
    values: np.ndarray

    @property
    def degree(self) -> int:
        return self.coefficients.size - 1

    def _unnormalized(self, z: np.ndarray) -> np.ndarray:
        clipped = np.clip(z, self.low, self.high)
        return np.exp(_legendre_design(clipped, self.low, self.high, self.degree) @ self.coefficients)

    def __call__(self, z) -> np.ndarray:
        z = np.atleast_1d(np.asarray(z, dtype=float))
        return self._unnormalized(z) / self.total_mass


def _legendre_design(z: np.ndarray, low: float, high: float, degree: int) -> np.ndarray:
    return L.legvander(2.0 * (z - low) / (high - low) - 1.0, degree)


def binning_range(z: np.ndarray, tail: float = LINDSEY_TAIL) -> Tuple[float, float]:
    """
    Histogram range: the [tail, 1 - tail] sample quantiles widened by a tenth
    of their span, never beyond the sample range. A handful of far outliers
    (repeated LASER draws of one extreme score) would otherwise stretch the
    range into mostly empty bins.
    """
    low, high = np.quantile(z, [tail, 1.0 - tail])
    pad = 0.1 * (high - low)
    low, high = max(float(np.min(z)), low - pad), min(float(np.max(z)), high + pad)
    if high <= low:
        low, high = float(np.min(z)), float(np.max(z))
    return low, high


def _poisson_fit(counts: np.ndarray, design: np.ndarray) -> Optional[np.ndarray]:
    """IRLS from a log(counts + 1) least-squares start, then lbfgs; None if neither converges."""
    start, *_ = np.linalg.lstsq(design, np.log(counts + 1.0), rcond=None)
    model = sm.GLM(counts, design, family=sm.families.Poisson())
    for method, options in (("IRLS", {}), ("lbfgs", {"maxiter": 2000})):
        try:
            result = model.fit(start_params=start, method=method, **options)
        except (ValueError, np.linalg.LinAlgError, OverflowError, FloatingPointError) as e:
            logger.debug(f"{method} Poisson fit raised: {e}")
            continue
        if method == "IRLS":
            converged = bool(getattr(result, "converged", True))
        else:
            converged = bool(result.mle_retvals.get("converged", False))
        params = np.asarray(result.params, dtype=float)
        if converged and np.all(np.isfinite(params)):
            return params
        logger.debug(f"{method} Poisson fit did not converge")
    return None


def lindsey_density(z, bins: int = LINDSEY_BINS, degree: int = LINDSEY_DEGREE) -> LindseyDensity:
    """
    Fit histogram counts by Poisson regression on a degree-`degree` Legendre
    design of the bin centers and normalize to unit integral over the binned
    range. When the full degree does not converge the degree is lowered one
    step at a time (down to 2) with a warning.
    """
    try:
        z = _finite_sample(z, MIN_LINDSEY_N, "Lindsey density")
        logger.debug(f"Fitting Lindsey density: n={z.size}, bins={bins}, degree={degree}")
        if bins < degree + 1 or degree < 0:
            raise ConfigError(f"Need bins > degree >= 0, got bins={bins}, degree={degree}")
        if np.max(z) <= np.min(z):
            raise DataError("Lindsey density needs a sample with positive range")
        low, high = binning_range(z)
        counts, edges = np.histogram(z, bins=bins, range=(low, high))
        centers = 0.5 * (edges[:-1] + edges[1:])

        coefficients, fitted_degree = None, degree
        for fitted_degree in range(degree, min(degree, 2) - 1, -1):
            coefficients = _poisson_fit(counts, _legendre_design(centers, low, high, fitted_degree))
            if coefficients is not None:
                break
            logger.warning({"degree": fitted_degree, "message": "Lindsey fit did not converge, lowering the degree"})
        if coefficients is None:
            raise NumericalError("Lindsey Poisson regression did not converge")

        grid = np.linspace(low, high, EVALUATION_POINTS)
        raw = np.exp(_legendre_design(grid, low, high, fitted_degree) @ coefficients)
        total = float(trapezoid(raw, grid))
        if not np.isfinite(total) or total <= 0:
            raise NumericalError("Lindsey density has non-positive mass")
        density = LindseyDensity(edges=edges, counts=counts, coefficients=coefficients, low=low, high=high,
                                 total_mass=total, grid=grid, values=raw / total)
        logger.info({"n": z.size, "bins": bins, "degree": fitted_degree, "message": "Lindsey density fitted"})
        return density
    except (ConfigError, DataError, NumericalError) as e:
        logger.error({"error": str(e), "message": "Failed to fit Lindsey density"})
        raise


@dataclass(frozen=True)
class EmpiricalNull:
    """Normal null N(mu0, sigma0^2) with null proportion pi0."""
    mu0: float
    sigma0: float
    pi0: float

    def __post_init__(self):
        if not self.sigma0 > 0:
            raise NumericalError(f"Empirical null scale must be positive, got {self.sigma0}")
        if not 0 < self.pi0 <= 1:
            raise NumericalError(f"Null proportion must lie in (0, 1], got {self.pi0}")

    def pdf(self, z) -> np.ndarray:
        return norm.pdf(np.asarray(z, dtype=float), loc=self.mu0, scale=self.sigma0)

    def pvalues(self, z) -> np.ndarray:
        """Two-sided p-values 2 * (1 - Phi(|z - mu0| / sigma0))."""
        return 2.0 * norm.sf(np.abs(np.asarray(z, dtype=float) - self.mu0) / self.sigma0)

    def as_dict(self) -> Dict[str, float]:
        return {"mu0": self.mu0, "sigma0": self.sigma0, "pi0": self.pi0}


def null_window(z: np.ndarray, window: NullWindow = NULL_WINDOW) -> Tuple[float, float]:
    """
    Central fitting window. "locfdr" is median +/- b * IQR/1.3489 with
    b = 4.3 * exp(-0.26 * log10 N) (b = 1 above 500000 scores); a pair of
    probabilities (q1, q2) gives the quantile window [Q(q1), Q(q2)].
    """
    if isinstance(window, str):
        if window != "locfdr":
            raise ConfigError(f"Unknown null window '{window}', expected 'locfdr' or a quantile pair")
        spread = float(np.subtract(*np.quantile(z, [0.75, 0.25]))) / IQR_TO_SD
        b = 1.0 if z.size > LOCFDR_WINDOW_N else 4.3 * np.exp(-0.26 * np.log10(z.size))
        center = float(np.median(z))
        return center - b * spread, center + b * spread
    q1, q2 = window
    if not 0 <= q1 < q2 <= 1:
        raise ConfigError(f"Quantile window must satisfy 0 <= q1 < q2 <= 1, got {window}")
    low, high = np.quantile(z, [q1, q2])
    return float(low), float(high)


def fit_empirical_null(z, window: NullWindow = NULL_WINDOW) -> EmpiricalNull:
    """
    Truncated-normal maximum likelihood on a central window (see
    `null_window`); pi0 is the window's sample fraction over the fitted
    null's window mass, capped at 1.
    """
    try:
        z = _finite_sample(z, MIN_LOCFDR_N, "Empirical null")
        logger.debug(f"Fitting empirical null on {z.size} scores, window={window}")
        low, high = null_window(z, window)
        if not high > low:
            raise NumericalError(f"Degenerate null window [{low}, {high}]")
        inside = z[(z >= low) & (z <= high)]

        def negative_loglik(params: np.ndarray) -> float:
            mu, log_sigma = params
            sigma = np.exp(log_sigma)
            mass = norm.cdf((high - mu) / sigma) - norm.cdf((low - mu) / sigma)
            if mass <= 0:
                return np.inf
            return -(np.sum(norm.logpdf(inside, loc=mu, scale=sigma)) - inside.size * np.log(mass))

        width = high - low
        spread = float(np.subtract(*np.quantile(z, [0.75, 0.25]))) / IQR_TO_SD
        start = np.array([np.median(z), np.log(spread if spread > 0 else width / IQR_TO_SD)])
        bounds = [(low - 5 * width, high + 5 * width), (np.log(width / 100), np.log(width * 100))]
        result = optimize.minimize(negative_loglik, start, method="Nelder-Mead", bounds=bounds,
                                   options={"xatol": 1e-7, "fatol": 1e-7, "maxiter": 4000})
        if not np.all(np.isfinite(result.x)):
            raise NumericalError(f"Empirical null fit failed: {result.message}")
        if not result.success:
            logger.warning({"reason": result.message, "message": "Empirical null optimizer stopped early"})
        mu0, sigma0 = float(result.x[0]), float(np.exp(result.x[1]))
        window_mass = norm.cdf((high - mu0) / sigma0) - norm.cdf((low - mu0) / sigma0)
        pi0 = float(min(1.0, (inside.size / z.size) / window_mass))
        null = EmpiricalNull(mu0=mu0, sigma0=sigma0, pi0=pi0)
        logger.info({**null.as_dict(), "n": z.size, "message": "Empirical null fitted"})
        return null
    except (ConfigError, DataError, NumericalError) as e:
        logger.error({"error": str(e), "message": "Failed to fit empirical null"})
        raise


@dataclass(frozen=True, eq=False)
class FdrCurve:
    """
    Local fdr on an increasing z-grid, with its components.

    `shift` records a regression adjustment already added back to the grid.
    Past the edges of the Lindsey binned range every component is held at
    its edge value.
    """
    z: np.ndarray
    fdr: np.ndarray
    f: np.ndarray
    f0: np.ndarray
    pi0: float
    null: Optional[EmpiricalNull] = None
    engine: str = "locfdr"
    shift: float = 0.0
    bags: int = 1

    def evaluate(self, z) -> np.ndarray:
        return np.interp(np.asarray(z, dtype=float), self.z, self.fdr)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"z": self.z, "fdr": self.fdr, "f": self.f, "f0_component": self.pi0 * self.f0})


def fdr_values(z, density: LindseyDensity, null: EmpiricalNull) -> np.ndarray:
    """fdr(z) = min(1, pi0 * f0(z) / f(z)), held at its value on the edge of the binned range."""
    z = np.clip(np.asarray(z, dtype=float), density.low, density.high)
    return np.minimum(1.0, null.pi0 * null.pdf(z) / density(z))


def locfdr_curve(z, grid: Optional[np.ndarray] = None, bins: int = LINDSEY_BINS,
                 degree: int = LINDSEY_DEGREE, null: Optional[EmpiricalNull] = None) -> FdrCurve:
    """Local fdr curve of a score sample; grid defaults to the sample range."""
    z = _finite_sample(z, MIN_LOCFDR_N, "locfdr")
    null = null or fit_empirical_null(z)
    density = lindsey_density(z, bins, degree)
    grid = np.linspace(np.min(z), np.max(z), FDR_GRID_SIZE) if grid is None else np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) <= 0):
        raise ConfigError("fdr grid must be strictly increasing")
    held = np.clip(grid, density.low, density.high)
    curve = FdrCurve(z=grid, fdr=fdr_values(grid, density, null), f=density(held), f0=null.pdf(held),
                     pi0=null.pi0, null=null)
    logger.info({"n": z.size, **null.as_dict(), "message": "locfdr curve computed"})
    return curve


def bh_procedure(p, alpha: float) -> np.ndarray:
    """
    Benjamini-Hochberg: indices of the k smallest p-values with
    k = max{i : p_(i) <= alpha * i / N}, returned in ascending index order.
    """
    p = np.asarray(p, dtype=float).reshape(-1)
    if not 0 < alpha < 1:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    if p.size and (not np.all(np.isfinite(p)) or np.any(p < 0) or np.any(p > 1)):
        raise DataError("p-values must lie in [0, 1]")
    if p.size == 0:
        return np.array([], dtype=int)
    order = np.argsort(p, kind="stable")
    critical = alpha * np.arange(1, p.size + 1) / p.size
    passing = np.flatnonzero(p[order] <= critical)
    if passing.size == 0:
        return np.array([], dtype=int)
    k = int(passing[-1]) + 1
    return np.sort(order[:k])


@dataclass(frozen=True, eq=False)
class EngineReport:
    """An engine's output at the requested target scores."""
    engine: str
    targets: np.ndarray
    fdr: np.ndarray
    pvalues: np.ndarray
    null: EmpiricalNull
    density: LindseyDensity


class Engine(ABC):
    """Global large-scale inference engine: score sample in, per-target report out."""

    name = "abstract"

    def run(self, sample, targets) -> EngineReport:
        sample = _finite_sample(sample, MIN_LOCFDR_N, f"{self.name} engine")
        targets = np.atleast_1d(np.asarray(targets, dtype=float))
        null = fit_empirical_null(sample)
        density = lindsey_density(sample)
        return EngineReport(engine=self.name, targets=targets, fdr=fdr_values(targets, density, null),
                            pvalues=null.pvalues(targets), null=null, density=density)

    def curve(self, sample, grid: Optional[np.ndarray] = None) -> FdrCurve:
        return locfdr_curve(sample, grid)

    @abstractmethod
    def decide(self, fdr: np.ndarray, pvalues: np.ndarray, alpha: float) -> Tuple[np.ndarray, float]:
        """Significance flags over all cases and the threshold used."""


class LocfdrEngine(Engine):
    name = "locfdr"

    def decide(self, fdr, pvalues, alpha):
        threshold = locfdr_threshold(alpha)
        return np.asarray(fdr) <= threshold, threshold


class BhEngine(Engine):
    name = "bh"

    def decide(self, fdr, pvalues, alpha):
        flags = np.zeros(np.asarray(pvalues).size, dtype=bool)
        flags[bh_procedure(pvalues, alpha)] = True
        return flags, alpha


def locfdr_threshold(alpha: float) -> float:
    if not 0 < alpha < 1:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    return min(LOCFDR_THRESHOLD_CAP, 2.0 * alpha)


ENGINE_REGISTRY: Dict[str, Engine] = {"locfdr": LocfdrEngine(), "bh": BhEngine()}


def get_engine(name: str) -> Engine:
    if name not in ENGINES or name not in ENGINE_REGISTRY:
        raise ConfigError(f"Unknown engine '{name}', expected one of {ENGINES}")
    return ENGINE_REGISTRY[name]
