import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Union
import numpy as np
import pandas as pd
import statsmodels.api as sm
from sklearn.neighbors import KNeighborsRegressor
from statsmodels.nonparametric.smoothers_lowess import lowess
from scipy.stats import norm
from src.config import (
    DEFAULT_M, DEFAULT_K, FDR_GRID_SIZE, DPS_FLOOR, IQR_TO_SD, NULL_METHODS, KNN_NEIGHBORS,
    SUBGROUP_CUT, MIN_LOCFDR_N, get_max_workers,
)
from src.dataset import Dataset
from src.engines import EmpiricalNull, FdrCurve, Engine, get_engine, fit_empirical_null, locfdr_curve
from src.errors import ConfigError, DataError, NumericalError
from src.laser import generate_laser
from src.relevance import RelevanceModel, UNIT_GRID, fit_relevance
from src.rng import derive_stream
from src.logger import get_logger

# Configure logging
logger = get_logger(__name__)

ADJUST_METHODS = ("ols", "smoother")
QUANTILE_LEVELS = (0.1, 0.25, 0.5, 0.75, 0.9)


@dataclass(frozen=True, eq=False)
class RegressionAdjustment:
    """
    Fitted conditional mean E[z|x] and the flattened scores y = z - E[z|x].

    `coefficients` holds (intercept, slopes...) for the least-squares fit.
    """
    method: str
    fitted: np.ndarray
    residuals: np.ndarray
    predictor: Callable[[np.ndarray], np.ndarray]
    coefficients: Optional[np.ndarray] = None

    @property
    def intercept(self) -> Optional[float]:
        return None if self.coefficients is None else float(self.coefficients[0])

    @property
    def slope(self) -> Optional[np.ndarray]:
        return None if self.coefficients is None else self.coefficients[1:]

    def predict(self, x0) -> float:
        profile = np.atleast_2d(np.asarray(x0, dtype=float))
        return float(self.predictor(profile)[0])


def regression_adjust(data: Dataset, method: str = "ols") -> RegressionAdjustment:
    """
    Remove first-order heterogeneity: least-squares line (all covariates) or
    a local smoother (lowess for one covariate, k-NN otherwise). Constant
    covariates reduce to the global mean.
    """
    try:
        logger.debug(f"Regression adjustment with method={method} on n={data.n}")
        if method not in ADJUST_METHODS:
            raise ConfigError(f"Unknown adjustment '{method}', expected one of {ADJUST_METHODS}")
        if data.n < 3:
            raise DataError(f"Regression adjustment needs at least 3 records, got {data.n}")
        z, x = data.z, data.x
        constant = bool(np.all(np.ptp(x, axis=0) == 0))

        if method == "ols":
            result = sm.OLS(z, sm.add_constant(x, has_constant="add")).fit()
            coefficients = np.asarray(result.params, dtype=float)

            def predictor(rows: np.ndarray) -> np.ndarray:
                return coefficients[0] + rows @ coefficients[1:]

            adjustment = RegressionAdjustment(method=method, fitted=np.asarray(result.fittedvalues),
                                              residuals=np.asarray(result.resid), predictor=predictor,
                                              coefficients=coefficients)
        elif constant:
            logger.warning({"message": "Constant covariates, smoother falls back to the global mean"})
            mean = float(np.mean(z))
            adjustment = RegressionAdjustment(method=method, fitted=np.full(data.n, mean), residuals=z - mean,
                                              predictor=lambda rows: np.full(rows.shape[0], mean))
        elif data.p == 1:
            fitted = lowess(z, x[:, 0], return_sorted=False)
            curve = pd.Series(fitted).groupby(x[:, 0]).mean()
            knots, values = curve.index.to_numpy(dtype=float), curve.to_numpy(dtype=float)
            adjustment = RegressionAdjustment(method=method, fitted=fitted, residuals=z - fitted,
                                              predictor=lambda rows: np.interp(rows[:, 0], knots, values))
        else:
            center, scale = x.mean(axis=0), np.where(x.std(axis=0) > 0, x.std(axis=0), 1.0)
            smoother = KNeighborsRegressor(n_neighbors=min(KNN_NEIGHBORS, data.n)).fit((x - center) / scale, z)
            fitted = smoother.predict((x - center) / scale)
            adjustment = RegressionAdjustment(method=method, fitted=fitted, residuals=z - fitted,
                                              predictor=lambda rows: smoother.predict((rows - center) / scale))
        logger.info({"method": method, "coefficients": None if adjustment.coefficients is None else adjustment.coefficients.tolist(),
                     "message": "Regression adjustment fitted"})
        return adjustment
    except (ConfigError, DataError) as e:
        logger.error({"error": str(e), "message": "Regression adjustment failed"})
        raise


def _working_data(data: Dataset, adjust: bool, adjust_method: str):
    if not adjust:
        return data, None
    adjustment = regression_adjust(data, adjust_method)
    return data.with_z(adjustment.residuals), adjustment


def _run_bags(bags: int, task: Callable[[int], object], flat: bool) -> List:
    if bags < 1:
        raise ConfigError(f"bags must be at least 1, got {bags}")
    if flat:
        # every bag of a flat model is the full data
        return [task(0)] * bags
    with ThreadPoolExecutor(max_workers=get_max_workers()) as pool:
        return list(pool.map(task, range(bags)))


def customized_fdr(data: Dataset, x0, engine: str = "locfdr", m: int = DEFAULT_M, seed: int = 1, bags: int = 1,
                   adjust: bool = False, adjust_method: str = "ols", selector: str = "bic", k: int = DEFAULT_K,
                   fitter: str = "ols", grid: Optional[np.ndarray] = None,
                   model: Optional[RelevanceModel] = None) -> FdrCurve:
    """
    fdr(z | x0) on a z-grid: relevance fit, LASER(N; x0), global engine on
    the LASER, mapped back to the z-domain. With bags > 1 the curve is the
    average over independent LASER draws.
    """
    try:
        logger.debug(f"Customized fdr at x0={x0}, engine={engine}, bags={bags}, adjust={adjust}")
        runner: Engine = get_engine(engine)
        working, adjustment = _working_data(data, adjust, adjust_method)
        shift = adjustment.predict(x0) if adjustment is not None else 0.0
        model = model or fit_relevance(working, m, selector, k, fitter)
        grid = np.linspace(np.min(data.z), np.max(data.z), FDR_GRID_SIZE) if grid is None else np.asarray(grid, dtype=float)
        flat = model.is_flat(x0)

        def bag(b: int) -> FdrCurve:
            laser = generate_laser(working, model, x0, seed=seed, stream=derive_stream(seed, "bag", b))
            return runner.curve(laser.samples, grid - shift)

        curves = _run_bags(bags, bag, flat)
        null = EmpiricalNull(mu0=float(np.mean([c.null.mu0 for c in curves])) + shift,
                             sigma0=float(np.mean([c.null.sigma0 for c in curves])),
                             pi0=float(np.mean([c.pi0 for c in curves])))
        curve = FdrCurve(z=grid, fdr=np.mean([c.fdr for c in curves], axis=0), f=np.mean([c.f for c in curves], axis=0),
                         f0=np.mean([c.f0 for c in curves], axis=0), pi0=null.pi0, null=null, engine=runner.name,
                         shift=shift, bags=bags)
        logger.info({"x0": np.atleast_1d(x0).tolist(), "flat": flat, "bags": bags, **null.as_dict(),
                     "message": "Customized fdr curve computed"})
        return curve
    except (ConfigError, DataError, NumericalError) as e:
        logger.error({"error": str(e), "message": "Customized fdr failed"})
        raise


@dataclass(frozen=True)
class FdrFactors:
    """Decomposition fdr(z|x) = fdr(z) * pi-ratio * null-ratio * 1/d."""
    fdr: float
    factor_pi: float
    factor_null_ratio: float
    factor_inv_d: float
    product: float
    floor_reached: bool = False

    def as_dict(self) -> dict:
        return {"fdr": self.fdr, "factor_pi": self.factor_pi, "factor_null_ratio": self.factor_null_ratio,
                "factor_inv_d": self.factor_inv_d, "product": self.product, "floor_reached": self.floor_reached}


def factorize_fdr(fdr_z: float, pi0: float, pi0_x: float, f0_z: float, f0_zx: float, d_value: float,
                  floor_reached: bool = False) -> FdrFactors:
    """Pure arithmetic of the global-to-local fdr decomposition."""
    if pi0 <= 0 or f0_z <= 0 or d_value <= 0:
        raise NumericalError("Factorization needs positive pi0, f0(z) and d")
    factor_pi = pi0_x / pi0
    factor_null_ratio = f0_zx / f0_z
    factor_inv_d = 1.0 / d_value
    return FdrFactors(fdr=float(fdr_z), factor_pi=float(factor_pi), factor_null_ratio=float(factor_null_ratio),
                      factor_inv_d=float(factor_inv_d),
                      product=float(fdr_z * factor_pi * factor_null_ratio * factor_inv_d),
                      floor_reached=bool(floor_reached))


@dataclass(frozen=True)
class RelevantNull:
    """x-specific null N(mu0(x), sigma0(x)^2) with pi0(x)."""
    x0: tuple
    mu0: float
    sigma0: float
    pi0: float
    method: str

    def as_null(self) -> EmpiricalNull:
        return EmpiricalNull(mu0=self.mu0, sigma0=self.sigma0, pi0=self.pi0)

    def as_dict(self) -> dict:
        return {"x0": list(self.x0), "mu0": self.mu0, "sigma0": self.sigma0, "pi0": self.pi0, "method": self.method}


def fdr_factorization(global_fdr: FdrCurve, relevant: RelevantNull, global_null: EmpiricalNull,
                      model: RelevanceModel, x0, z: float) -> FdrFactors:
    """Evaluate the three decomposition factors at (x0, z) from fitted components."""
    u = model.basis.cdf(z)
    d_value = float(model.density(x0, u)[0])
    floor_reached = bool(model.floor_reached(x0, u)[0])
    factors = factorize_fdr(
        fdr_z=float(global_fdr.evaluate(z)), pi0=global_null.pi0, pi0_x=relevant.pi0,
        f0_z=float(global_null.pdf(z)), f0_zx=float(norm.pdf(z, loc=relevant.mu0, scale=relevant.sigma0)),
        d_value=d_value, floor_reached=floor_reached,
    )
    if floor_reached:
        logger.warning({"x0": np.atleast_1d(x0).tolist(), "z": float(z), "message": "Relevance floor reached in factorization"})
    return factors


def conditional_quantile(model: RelevanceModel, data: Dataset, u, x0) -> Union[float, np.ndarray]:
    """
    Q(u | x0) = Q_Z(D_x0^{-1}(u)): invert the relevance cdf on the unit grid,
    then take the sample quantile of z.
    """
    levels = np.asarray(u, dtype=float)
    if np.any(levels <= 0) or np.any(levels >= 1):
        raise ConfigError("Quantile levels must lie in (0, 1)")
    if model.is_flat(x0):
        values = np.quantile(data.z, levels)
    else:
        values = np.quantile(data.z, np.interp(levels, model.grid_cdf(x0), UNIT_GRID))
    return float(values) if levels.ndim == 0 else np.asarray(values)


def conditional_quantile_curves(model: RelevanceModel, data: Dataset, targets,
                                levels: Sequence[float] = QUANTILE_LEVELS) -> pd.DataFrame:
    names = data.covariate_names
    rows = []
    for target in np.asarray(targets, dtype=float).reshape(-1, data.p):
        quantiles = conditional_quantile(model, data, np.asarray(levels), target)
        row = dict(zip(names, target))
        row.update({f"q{level:g}": value for level, value in zip(levels, quantiles)})
        rows.append(row)
    return pd.DataFrame(rows)


def relevant_null(data: Dataset, x0, method: str = "laser", seed: int = 1, m: int = DEFAULT_M,
                  selector: str = "bic", k: int = DEFAULT_K, fitter: str = "ols",
                  model: Optional[RelevanceModel] = None) -> RelevantNull:
    """
    x-specific empirical null. `laser` fits the empirical null on LASER(N; x0);
    `quantile` uses conditional quartiles, mu0 = Q(.5|x), sigma0 = IQR(x)/1.349,
    with the global pi0.
    """
    method = "laser" if method == "laser-locfdr" else method
    if method not in NULL_METHODS:
        raise ConfigError(f"Unknown null method '{method}', expected one of {NULL_METHODS}")
    logger.debug(f"Relevant null at x0={x0} by {method}")
    model = model or fit_relevance(data, m, selector, k, fitter)
    profile = tuple(np.atleast_1d(np.asarray(x0, dtype=float)).tolist())
    if method == "laser":
        laser = generate_laser(data, model, x0, seed=seed, stream=derive_stream(seed, "relevant-null"))
        fitted = fit_empirical_null(laser.samples)
        result = RelevantNull(x0=profile, mu0=fitted.mu0, sigma0=fitted.sigma0, pi0=fitted.pi0, method=method)
    else:
        q25, q50, q75 = conditional_quantile(model, data, np.array([0.25, 0.5, 0.75]), x0)
        if not q75 > q25:
            raise NumericalError(f"Conditional quartiles coincide at x0={list(profile)}")
        result = RelevantNull(x0=profile, mu0=float(q50), sigma0=float((q75 - q25) / IQR_TO_SD),
                              pi0=fit_empirical_null(data.z).pi0, method=method)
    logger.info({**result.as_dict(), "message": "Relevant null estimated"})
    return result


def dps_scores(fdr) -> np.ndarray:
    """Discovery propensity -log10(fdr), fdr floored at 1e-12."""
    fdr = np.asarray(fdr, dtype=float)
    if np.any(~np.isfinite(fdr)) or np.any(fdr < 0) or np.any(fdr > 1):
        raise DataError("fdr values must lie in [0, 1]")
    return -np.log10(np.maximum(fdr, DPS_FLOOR))


@dataclass(frozen=True, eq=False)
class InferenceReport:
    """
    Per-case macro inference result 📋

    `frame` columns: id, covariates, z, fdr, dps, significant (+ theta when
    the truth is known).
    """
    frame: pd.DataFrame
    engine: str
    alpha: float
    threshold: float
    seed: int
    customized: bool
    rejections: int
    false_discoveries: Optional[int] = None
    misses: Optional[int] = None
    fallback_groups: int = 0

    @property
    def significant(self) -> np.ndarray:
        return self.frame["significant"].to_numpy(dtype=bool)

    @property
    def discoveries(self) -> np.ndarray:
        return np.flatnonzero(self.significant)

    def ranked(self, top: Optional[int] = None) -> pd.DataFrame:
        ordered = self.frame.sort_values("dps", ascending=False, kind="mergesort").reset_index(drop=True)
        ordered.insert(0, "rank", np.arange(1, len(ordered) + 1))
        return ordered if top is None else ordered.head(top)

    def summary(self) -> dict:
        return {"R": self.rejections, "fr": self.false_discoveries, "miss": self.misses, "threshold": self.threshold,
                "engine": self.engine, "alpha": self.alpha, "customized": self.customized, "seed": self.seed,
                "fallback_groups": self.fallback_groups}


def _truth_counts(flags: np.ndarray, truth: Optional[np.ndarray]):
    if truth is None:
        return None, None
    signal = truth != 0
    return int(np.sum(flags & ~signal)), int(np.sum(~flags & signal))


def macro_inference(data: Dataset, engine: str = "locfdr", alpha: float = 0.05, seed: int = 1,
                    threshold_rule: Optional[float] = None, customized: bool = True, m: int = DEFAULT_M,
                    selector: str = "bic", k: int = DEFAULT_K, fitter: str = "ols", adjust: bool = False,
                    adjust_method: str = "ols") -> InferenceReport:
    """
    Score every case: cases sharing a covariate profile share one relevance
    evaluation, LASER and engine fit. Cases are flagged by the engine's rule
    (locfdr cutoff min(0.2, 2 alpha), or BH over all relevant p-values).
    `threshold_rule` overrides the locfdr cutoff.
    """
    try:
        logger.debug(f"Macro inference: engine={engine}, alpha={alpha}, customized={customized}, seed={seed}")
        runner = get_engine(engine)
        if not 0 < alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
        working, _ = _working_data(data, adjust, adjust_method)
        fdr = np.ones(data.n)
        pvalues = np.ones(data.n)

        fallbacks: List[int] = []
        if not customized:
            report = runner.run(working.z, working.z)
            fdr, pvalues = report.fdr, report.pvalues
        else:
            model = fit_relevance(working, m, selector, k, fitter)
            profiles, inverse = np.unique(working.x, axis=0, return_inverse=True)
            inverse = np.asarray(inverse).reshape(-1)
            lock = threading.Lock()
            shared: Dict[str, object] = {}

            def global_report():
                with lock:
                    if "report" not in shared:
                        shared["report"] = runner.run(working.z, working.z)
                return shared["report"]

            def group(g: int) -> None:
                rows = np.flatnonzero(inverse == g)
                if model.is_flat(profiles[g]):
                    report = global_report()
                    fdr[rows], pvalues[rows] = report.fdr[rows], report.pvalues[rows]
                    return
                try:
                    laser = generate_laser(working, model, profiles[g], seed=seed, stream=derive_stream(seed, "macro", g))
                    report = runner.run(laser.samples, working.z[rows])
                    fdr[rows], pvalues[rows] = report.fdr, report.pvalues
                except NumericalError as e:
                    # the group keeps the global engine's verdict
                    logger.warning({"profile": profiles[g].tolist(), "error": str(e),
                                    "message": "Customized engine failed for a profile, using the global fit"})
                    with lock:
                        fallbacks.append(g)
                    report = global_report()
                    fdr[rows], pvalues[rows] = report.fdr[rows], report.pvalues[rows]

            with ThreadPoolExecutor(max_workers=get_max_workers()) as pool:
                list(pool.map(group, range(profiles.shape[0])))
            logger.info({"groups": int(profiles.shape[0]), "fallbacks": len(fallbacks),
                         "message": "Per-profile engine runs finished"})

        if threshold_rule is not None and runner.name == "locfdr":
            flags, threshold = fdr <= threshold_rule, float(threshold_rule)
        else:
            flags, threshold = runner.decide(fdr, pvalues, alpha)
        frame = data.to_frame()
        frame["fdr"] = fdr
        frame["dps"] = dps_scores(fdr)
        frame["significant"] = flags
        false_discoveries, misses = _truth_counts(flags, data.truth)
        report = InferenceReport(frame=frame, engine=runner.name, alpha=alpha, threshold=float(threshold), seed=seed,
                                 customized=customized, rejections=int(flags.sum()),
                                 false_discoveries=false_discoveries, misses=misses, fallback_groups=len(fallbacks))
        logger.info({**report.summary(), "message": "Macro inference finished"})
        return report
    except (ConfigError, DataError, NumericalError) as e:
        logger.error({"error": str(e), "message": "Macro inference failed"})
        raise


@dataclass(frozen=True, eq=False)
class ReproducibilityReport:
    """Discovery overlap between two replications of one design."""
    first: InferenceReport
    second: InferenceReport
    intersection: np.ndarray
    true_in_intersection: Optional[int] = None
    false_in_intersection: Optional[int] = None

    def summary(self) -> dict:
        return {"R1": self.first.rejections, "R2": self.second.rejections, "common": int(self.intersection.size),
                "common_true": self.true_in_intersection, "common_false": self.false_in_intersection}


def reproducibility_report(data1: Dataset, data2: Dataset, engine: str = "locfdr", alpha: float = 0.05,
                           seed: int = 1, customized: bool = True, **options) -> ReproducibilityReport:
    """Run macro inference on both replications and intersect their discovery sets."""
    if data1.x.shape != data2.x.shape or not np.array_equal(data1.x, data2.x):
        logger.error({"message": "Replications do not share the covariate design"})
        raise DataError("Replications must share the covariate design")
    first = macro_inference(data1, engine, alpha, seed, customized=customized, **options)
    second = macro_inference(data2, engine, alpha, seed, customized=customized, **options)
    common = np.intersect1d(first.discoveries, second.discoveries)
    truth = data1.truth if data1.truth is not None else data2.truth
    true_common = None if truth is None else int(np.sum(truth[common] != 0))
    false_common = None if truth is None else int(common.size - true_common)
    report = ReproducibilityReport(first=first, second=second, intersection=common,
                                   true_in_intersection=true_common, false_in_intersection=false_common)
    logger.info({**report.summary(), "message": "Reproducibility report ready"})
    return report


def subgroup_fdr(data: Dataset, covariate: Union[int, str] = 0, cut: float = SUBGROUP_CUT) -> Dict[str, FdrCurve]:
    """
    Semi-global analysis: split at x_c >= cut and run the global locfdr in
    each half. Keys are "below" and "above".
    """
    if isinstance(covariate, str) and covariate not in data.covariate_names:
        raise ConfigError(f"Unknown covariate '{covariate}', expected one of {list(data.covariate_names)}")
    column = data.covariate_names.index(covariate) if isinstance(covariate, str) else int(covariate)
    if not 0 <= column < data.p:
        raise ConfigError(f"Covariate index {column} out of range for p={data.p}")
    upper = data.x[:, column] >= cut
    curves = {}
    for name, mask in (("below", ~upper), ("above", upper)):
        if mask.sum() < MIN_LOCFDR_N:
            raise DataError(f"Subgroup '{name}' has {int(mask.sum())} records, needs {MIN_LOCFDR_N}")
        curves[name] = locfdr_curve(data.z[mask])
        logger.info({"subgroup": name, "n": int(mask.sum()), **curves[name].null.as_dict(), "message": "Subgroup fdr fitted"})
    return curves
