from dataclasses import dataclass
from typing import List, Optional
import numpy as np
import pandas as pd
from scipy.stats import iqr, norm
from src.config import NPMLE_GRID_SIZE, NPMLE_TOL, NPMLE_MAX_ITER, MIN_NPMLE_N, HPD_ALPHA, IQR_TO_SD
from src.errors import ConfigError, DataError, NumericalError
from src.logger import get_logger

# Configure logging
logger = get_logger(__name__)


def default_sigma(z) -> float:
    """Robust noise scale IQR(z)/1.3489."""
    sigma = float(iqr(np.asarray(z, dtype=float)) / IQR_TO_SD)
    if not sigma > 0:
        raise NumericalError("Noise scale from the IQR is zero")
    return sigma


@dataclass(frozen=True, eq=False)
class PriorEstimate:
    """
    Discrete prior on a theta-grid 🧭

    `loglik` is the EM log-likelihood trace, one entry per iteration.
    """
    grid: np.ndarray
    weights: np.ndarray
    sigma: float
    loglik: np.ndarray

    @property
    def iterations(self) -> int:
        return int(self.loglik.size)

    def mean(self) -> float:
        return float(self.grid @ self.weights)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"theta": self.grid, "mass": self.weights})


def npmle_prior(z, sigma: Optional[float] = None, grid_size: int = NPMLE_GRID_SIZE, tol: float = NPMLE_TOL,
                max_iter: int = NPMLE_MAX_ITER, theta_grid: Optional[np.ndarray] = None) -> PriorEstimate:
    """
    Grid NPMLE of the prior under z_i ~ N(theta_i, sigma^2) by EM.

    The grid spans [min z - sigma, max z + sigma] unless `theta_grid` is
    given. Iteration stops once the log-likelihood gain falls below
    tol * (1 + |loglik|) or after max_iter steps.
    """
    try:
        z = np.asarray(z, dtype=float).reshape(-1)
        if z.size < MIN_NPMLE_N:
            raise DataError(f"NPMLE needs at least {MIN_NPMLE_N} scores, got {z.size}")
        if not np.all(np.isfinite(z)):
            raise DataError("NPMLE needs finite scores")
        sigma = default_sigma(z) if sigma is None else float(sigma)
        if not sigma > 0:
            raise ConfigError(f"sigma must be positive, got {sigma}")
        if theta_grid is None:
            if grid_size < 2:
                raise ConfigError(f"grid_size must be at least 2, got {grid_size}")
            grid = np.linspace(np.min(z) - sigma, np.max(z) + sigma, grid_size)
        else:
            grid = np.asarray(theta_grid, dtype=float)
        logger.debug(f"Running NPMLE EM: n={z.size}, grid={grid.size}, sigma={sigma}")

        likelihood = norm.pdf(z[:, None], loc=grid[None, :], scale=sigma)
        weights = np.full(grid.size, 1.0 / grid.size)
        trace: List[float] = []
        for _ in range(max_iter):
            mixture = likelihood @ weights
            if not np.all(np.isfinite(mixture)) or np.any(mixture <= 0):
                raise NumericalError("Non-finite NPMLE likelihood: some scores have zero mixture density")
            loglik = float(np.sum(np.log(mixture)))
            if trace and loglik - trace[-1] < tol * (1.0 + abs(trace[-1])):
                trace.append(loglik)
                break
            trace.append(loglik)
            weights = weights * (likelihood.T @ (1.0 / mixture)) / z.size
            weights = weights / weights.sum()

        prior = PriorEstimate(grid=grid, weights=weights, sigma=sigma, loglik=np.asarray(trace))
        logger.info({"n": z.size, "iterations": prior.iterations, "loglik": trace[-1], "message": "NPMLE prior estimated"})
        return prior
    except (ConfigError, DataError, NumericalError) as e:
        logger.error({"error": str(e), "message": "NPMLE prior estimation failed"})
        raise


@dataclass(frozen=True, eq=False)
class Posterior:
    """Posterior mass on the prior grid with mean and HPD set."""
    grid: np.ndarray
    mass: np.ndarray
    mean: float
    hpd: np.ndarray
    lower: float
    upper: float
    alpha: float

    @property
    def mode(self) -> float:
        return float(self.grid[np.argmax(self.mass)])

    @property
    def hpd_mass(self) -> float:
        return float(self.mass[self.hpd].sum())

    def shifted(self, offset: float) -> "Posterior":
        """Same posterior on a translated scale (y-domain to z-domain)."""
        return Posterior(grid=self.grid + offset, mass=self.mass, mean=self.mean + offset, hpd=self.hpd,
                         lower=self.lower + offset, upper=self.upper + offset, alpha=self.alpha)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"theta": self.grid, "mass": self.mass, "hpd": self.hpd})


def summarize_posterior(grid: np.ndarray, mass: np.ndarray, alpha: float = HPD_ALPHA) -> Posterior:
    """Mean and highest-posterior-density set from a posterior mass vector."""
    if not 0 < alpha < 1:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    total = float(np.sum(mass))
    if not np.isfinite(total) or total <= 0:
        raise NumericalError("Posterior mass is zero everywhere")
    mass = np.asarray(mass, dtype=float) / total
    order = np.argsort(-mass, kind="stable")
    cumulative = np.cumsum(mass[order])
    size = int(np.searchsorted(cumulative, 1.0 - alpha - 1e-12)) + 1
    hpd = np.zeros(mass.size, dtype=bool)
    hpd[order[:min(size, mass.size)]] = True
    members = grid[hpd]
    return Posterior(grid=grid, mass=mass, mean=float(grid @ mass), hpd=hpd,
                     lower=float(members.min()), upper=float(members.max()), alpha=alpha)


def posterior(prior: PriorEstimate, z: float, sigma: Optional[float] = None, alpha: float = HPD_ALPHA) -> Posterior:
    """
    mass_g proportional to w_g * N(z; theta_g, sigma^2), with posterior mean
    and a 1-alpha HPD set by descending-mass accumulation.
    """
    sigma = prior.sigma if sigma is None else float(sigma)
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    mass = prior.weights * norm.pdf(float(z), loc=prior.grid, scale=sigma)
    try:
        result = summarize_posterior(prior.grid, mass, alpha)
    except NumericalError as e:
        logger.error({"error": str(e), "z": float(z), "message": "Posterior undefined at this score"})
        raise
    logger.debug(f"Posterior at z={z}: mean={result.mean:.4f}, HPD=({result.lower:.4f}, {result.upper:.4f})")
    return result
