from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Tuple
import numpy as np
from src.config import (
    DEFAULT_M, DEFAULT_K, DEFAULT_BAGS, HPD_ALPHA, NPMLE_GRID_SIZE, FINITE_BAYES_B,
    FINITE_BAYES_FAILURE_BUDGET, get_max_workers,
)
from src.custom_inference import regression_adjust
from src.dataset import Dataset
from src.empirical_bayes import (
    PriorEstimate, Posterior, default_sigma, npmle_prior, posterior, summarize_posterior,
)
from src.errors import ConfigError, DataError, NumericalError
from src.laser import generate_laser
from src.relevance import fit_relevance
from src.rng import derive_stream
from src.logger import get_logger

# Configure logging
logger = get_logger(__name__)


@dataclass(frozen=True, eq=False)
class RebResult:
    """
    Effect-size inference for one target case 🎯

    The prior and `posterior_y` live on the flattened y-scale; `posterior_z`
    is the same posterior with E[z|x0] added back.
    """
    prior: PriorEstimate
    posterior_y: Posterior
    posterior_z: Posterior
    shift: float
    y0: float
    bags: int
    flat: bool
    sigma: float

    def summary(self) -> dict:
        return {
            "y0": self.y0, "shift": self.shift, "sigma": self.sigma, "bags": self.bags, "flat": self.flat,
            "mean_y": self.posterior_y.mean, "hpd_y": [self.posterior_y.lower, self.posterior_y.upper],
            "mean_z": self.posterior_z.mean, "hpd_z": [self.posterior_z.lower, self.posterior_z.upper],
            "level": 1.0 - self.posterior_y.alpha,
        }


def _flatten(data: Dataset, adjust: bool, adjust_method: str, x0) -> Tuple[Dataset, float]:
    if not adjust:
        return data, 0.0
    adjustment = regression_adjust(data, adjust_method)
    shift = adjustment.predict(x0) if x0 is not None else 0.0
    return data.with_z(adjustment.residuals), shift


def theta_grid(y: np.ndarray, grid_size: int = NPMLE_GRID_SIZE) -> np.ndarray:
    """Common prior support: the y range widened by IQR(y)/1.3489 on each side."""
    spread = default_sigma(y)
    return np.linspace(np.min(y) - spread, np.max(y) + spread, grid_size)


def reb_inference(data: Dataset, x0, z0: float, seed: int = 1, bags: int = DEFAULT_BAGS, alpha: float = HPD_ALPHA,
                  adjust: bool = True, adjust_method: str = "ols", m: int = DEFAULT_M, selector: str = "bic",
                  k: int = DEFAULT_K, fitter: str = "ols", sigma: Optional[float] = None) -> RebResult:
    """
    Relevance-integrated empirical Bayes: flatten, draw LASER(N; x0) on the
    y-scale, estimate the NPMLE prior on each bag, and average the bag
    posteriors at y0 = z0 - E[z|x0].
    """
    try:
        logger.debug(f"rEB at x0={x0}, z0={z0}, bags={bags}, seed={seed}, adjust={adjust}")
        if not np.isfinite(z0):
            raise ConfigError(f"Target score must be finite, got {z0}")
        if bags < 1:
            raise ConfigError(f"bags must be at least 1, got {bags}")
        working, shift = _flatten(data, adjust, adjust_method, x0)
        y0 = float(z0) - shift
        model = fit_relevance(working, m, selector, k, fitter)
        flat = model.is_flat(x0)
        grid = theta_grid(working.z)

        def bag(b: int) -> Tuple[PriorEstimate, Posterior]:
            laser = generate_laser(working, model, x0, seed=seed, stream=derive_stream(seed, "reb", b))
            scale = default_sigma(laser.samples) if sigma is None else sigma
            prior = npmle_prior(laser.samples, scale, theta_grid=grid)
            return prior, posterior(prior, y0, scale, alpha)

        if flat:
            results = [bag(0)] * bags
        else:
            with ThreadPoolExecutor(max_workers=get_max_workers()) as pool:
                results = list(pool.map(bag, range(bags)))

        priors = [prior for prior, _ in results]
        averaged_prior = PriorEstimate(grid=grid, weights=np.mean([p.weights for p in priors], axis=0),
                                       sigma=float(np.mean([p.sigma for p in priors])), loglik=priors[0].loglik)
        posterior_y = summarize_posterior(grid, np.mean([post.mass for _, post in results], axis=0), alpha)
        result = RebResult(prior=averaged_prior, posterior_y=posterior_y, posterior_z=posterior_y.shifted(shift),
                           shift=shift, y0=y0, bags=bags, flat=flat, sigma=averaged_prior.sigma)
        logger.info({**result.summary(), "message": "rEB inference finished"})
        return result
    except (ConfigError, DataError, NumericalError) as e:
        logger.error({"error": str(e), "message": "rEB inference failed"})
        raise


def global_eb_inference(data: Dataset, z0: float, x0=None, alpha: float = HPD_ALPHA, adjust: bool = False,
                        adjust_method: str = "ols", sigma: Optional[float] = None) -> RebResult:
    """Global empirical Bayes: one NPMLE prior on every (optionally flattened) score."""
    try:
        if adjust and x0 is None:
            raise ConfigError("A target profile is required to undo the regression adjustment")
        working, shift = _flatten(data, adjust, adjust_method, x0)
        y0 = float(z0) - shift
        scale = default_sigma(working.z) if sigma is None else sigma
        grid = theta_grid(working.z)
        prior = npmle_prior(working.z, scale, theta_grid=grid)
        posterior_y = posterior(prior, y0, scale, alpha)
        result = RebResult(prior=prior, posterior_y=posterior_y, posterior_z=posterior_y.shifted(shift), shift=shift,
                           y0=y0, bags=1, flat=True, sigma=scale)
        logger.info({**result.summary(), "message": "Global EB inference finished"})
        return result
    except (ConfigError, DataError, NumericalError) as e:
        logger.error({"error": str(e), "message": "Global EB inference failed"})
        raise


@dataclass(frozen=True, eq=False)
class FiniteBayesResult:
    """Averaged parametric-bootstrap posterior and the single-run posterior it widens."""
    averaged: Posterior
    single: Posterior
    prior: PriorEstimate
    sigma: float
    cycles: int
    failures: int

    @property
    def interval(self) -> Tuple[float, float]:
        return self.averaged.lower, self.averaged.upper

    def summary(self) -> dict:
        return {"mean": self.averaged.mean, "ci": list(self.interval), "single_mean": self.single.mean,
                "single_ci": [self.single.lower, self.single.upper], "sigma": self.sigma,
                "cycles": self.cycles, "failures": self.failures}


def finite_bayes_ci(data: Dataset, x0, y0: float, B: int = FINITE_BAYES_B, alpha: float = HPD_ALPHA, seed: int = 1,
                    adjust: bool = True, adjust_method: str = "ols", m: int = DEFAULT_M, selector: str = "bic",
                    k: int = DEFAULT_K, fitter: str = "ols") -> FiniteBayesResult:
    """
    Finite-Bayes credible interval at y0 (flattened scale).

    sigma from the LASER's IQR; rEB prior on the LASER; then B cycles that
    draw theta from the prior, simulate y* ~ N(theta, sigma^2), re-estimate
    prior and posterior. The averaged posterior gives the interval. Failed
    cycles are counted; more than 10% failures is an error.
    """
    try:
        logger.debug(f"Finite-Bayes CI at x0={x0}, y0={y0}, B={B}, seed={seed}")
        if B < 2:
            raise ConfigError(f"Finite-Bayes needs B >= 2 cycles, got {B}")
        working, _ = _flatten(data, adjust, adjust_method, x0)
        model = fit_relevance(working, m, selector, k, fitter)
        laser = generate_laser(working, model, x0, seed=seed, stream=derive_stream(seed, "finite-bayes", 0))
        sigma = default_sigma(laser.samples)
        grid = theta_grid(working.z)
        prior = npmle_prior(laser.samples, sigma, theta_grid=grid)
        single = posterior(prior, y0, sigma, alpha)

        def cycle(b: int) -> Optional[np.ndarray]:
            rng = derive_stream(seed, "finite-bayes", b + 1).generator
            theta = rng.choice(grid, size=laser.n, p=prior.weights / prior.weights.sum())
            simulated = theta + sigma * rng.standard_normal(laser.n)
            try:
                refit = npmle_prior(simulated, sigma, theta_grid=grid)
                return posterior(refit, y0, sigma, alpha).mass
            except NumericalError as e:
                logger.warning({"cycle": b, "error": str(e), "message": "Finite-Bayes cycle failed"})
                return None

        with ThreadPoolExecutor(max_workers=get_max_workers()) as pool:
            masses = list(pool.map(cycle, range(B)))
        kept = [mass for mass in masses if mass is not None]
        failures = B - len(kept)
        if failures > FINITE_BAYES_FAILURE_BUDGET * B or not kept:
            raise NumericalError(f"{failures} of {B} finite-Bayes cycles failed")
        averaged = summarize_posterior(grid, np.mean(kept, axis=0), alpha)
        result = FiniteBayesResult(averaged=averaged, single=single, prior=prior, sigma=sigma, cycles=len(kept),
                                   failures=failures)
        logger.info({**result.summary(), "message": "Finite-Bayes interval computed"})
        return result
    except (ConfigError, DataError, NumericalError) as e:
        logger.error({"error": str(e), "message": "Finite-Bayes interval failed"})
        raise
