import threading
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple
import numpy as np
import pandas as pd
from scipy.integrate import cumulative_trapezoid, trapezoid
from scipy.linalg import qr
from sklearn.neighbors import KNeighborsRegressor
from src.config import (
    DEFAULT_M, DEFAULT_K, DISCRETE_MAX_LEVELS, DENSITY_FLOOR, NORMALIZATION_GRID_SIZE,
    MAX_GRID_SIZE, SELECTORS, FITTERS, KNN_NEIGHBORS, BOOTSTRAP_B, RANK_TOL, get_max_workers,
)
from src.dataset import Dataset
from src.errors import ConfigError, DataError, NumericalError
from src.lp_basis import LpBasis, build_basis, rank_lookup
from src.rng import derive_stream
from src.logger import get_logger

# Configure logging
logger = get_logger(__name__)

UNIT_GRID = np.linspace(0.0, 1.0, NORMALIZATION_GRID_SIZE)


def _as_profile(x0, p: int) -> np.ndarray:
    profile = np.atleast_1d(np.asarray(x0, dtype=float)).reshape(-1)
    if profile.size != p:
        raise ConfigError(f"Target profile has {profile.size} values, the design has {p} covariates")
    if not np.all(np.isfinite(profile)):
        raise ConfigError("Target profile must be finite")
    return profile


@dataclass(frozen=True, eq=False)
class CovariateTerm:
    """One covariate's block of regressors: LP polynomials or indicator contrasts."""
    name: str
    kind: str
    sorted_values: np.ndarray
    basis: Optional[LpBasis] = None
    levels: Optional[np.ndarray] = None

    @property
    def column_names(self) -> List[str]:
        if self.kind == "lp":
            return [f"{self.name}:T{j + 1}" for j in range(self.basis.m)]
        return [f"{self.name}=={level:g}" for level in self.levels[1:]]

    def columns(self, values: np.ndarray) -> np.ndarray:
        if self.kind == "lp":
            return self.basis.evaluate_u(rank_lookup(self.sorted_values, values))
        return (values[:, None] == self.levels[None, 1:]).astype(float)

    def ranks(self, values: np.ndarray) -> np.ndarray:
        return rank_lookup(self.sorted_values, values)


def _build_term(name: str, values: np.ndarray, k: int) -> CovariateTerm:
    levels = np.unique(values)
    if levels.size <= DISCRETE_MAX_LEVELS:
        if levels.size == 1:
            logger.warning({"covariate": name, "message": "Constant covariate contributes no regressors"})
        return CovariateTerm(name=name, kind="discrete", sorted_values=np.sort(values), levels=levels)
    degree = min(k, levels.size - 1)
    return CovariateTerm(name=name, kind="lp", sorted_values=np.sort(values), basis=build_basis(values, degree))


@dataclass(frozen=True, eq=False)
class XBasis:
    """
    Regressor system for the covariates 🧮

    Per-covariate rank polynomials (continuous) or indicator contrasts
    (discrete), plus pairwise products of each covariate's first column.
    """
    terms: Tuple[CovariateTerm, ...]
    interactions: Tuple[Tuple[int, int], ...]

    @property
    def p(self) -> int:
        return len(self.terms)

    @property
    def column_names(self) -> List[str]:
        names = ["(intercept)"]
        for term in self.terms:
            names.extend(term.column_names)
        for a, b in self.interactions:
            names.append(f"{self.terms[a].column_names[0]}*{self.terms[b].column_names[0]}")
        return names

    def design(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        blocks = [np.ones((x.shape[0], 1))]
        firsts = []
        for c, term in enumerate(self.terms):
            block = term.columns(x[:, c])
            blocks.append(block)
            firsts.append(block[:, 0] if block.shape[1] else None)
        for a, b in self.interactions:
            blocks.append((firsts[a] * firsts[b])[:, None])
        return np.hstack(blocks)

    def ranks(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.column_stack([term.ranks(x[:, c]) for c, term in enumerate(self.terms)])


def build_x_basis(x: np.ndarray, k: int = DEFAULT_K, names: Sequence[str] = ()) -> XBasis:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    names = list(names) or [f"x{c + 1}" for c in range(x.shape[1])]
    terms = tuple(_build_term(names[c], x[:, c], k) for c in range(x.shape[1]))
    active = [c for c, term in enumerate(terms) if term.column_names]
    interactions = tuple((a, b) for i, a in enumerate(active) for b in active[i + 1:])
    return XBasis(terms=terms, interactions=interactions)


def _check_design(design: np.ndarray, names: List[str]) -> None:
    """Raise NumericalError naming the collinear regressors when the design is singular."""
    _, r, pivots = qr(design, mode="economic", pivoting=True)
    diagonal = np.abs(np.diag(r))
    tol = max(design.shape) * np.finfo(float).eps * (diagonal[0] if diagonal.size else 0.0)
    rank = int(np.sum(diagonal > max(tol, RANK_TOL)))
    if rank < design.shape[1]:
        collinear = [names[i] for i in pivots[rank:]]
        raise NumericalError(f"Singular covariate design; collinear terms: {collinear}")


class ConditionalMeanFitter(ABC):
    """Estimates x -> E[T_j(Z) | X = x] for j = 1..m."""

    name = "abstract"
    thresholded = True

    @abstractmethod
    def fit(self, x_basis: XBasis, x: np.ndarray, targets: np.ndarray) -> "ConditionalMeanFitter":
        ...

    @abstractmethod
    def predict(self, x: np.ndarray) -> np.ndarray:
        ...

    def selected_terms(self) -> Dict[int, List[str]]:
        return {}


def _criterion(rss: float, n: int, size: int, selector: str) -> float:
    penalty = np.log(n) if selector == "bic" else 2.0
    return n * np.log(max(rss / n, 1e-300)) + size * penalty


def _rss(design: np.ndarray, response: np.ndarray) -> Tuple[np.ndarray, float]:
    beta, _, _, _ = np.linalg.lstsq(design, response, rcond=None)
    residual = response - design @ beta
    return beta, float(residual @ residual)


class LeastSquaresFitter(ConditionalMeanFitter):
    """
    Per-response least squares on the x-basis with forward stepwise
    BIC/AIC selection; `none` keeps every regressor.
    """

    name = "ols"

    def __init__(self, selector: str = "bic"):
        if selector not in SELECTORS:
            raise ConfigError(f"Unknown selector '{selector}', expected one of {SELECTORS}")
        self.selector = selector
        self.thresholded = selector != "none"
        self.x_basis: Optional[XBasis] = None
        self.coefficients: Optional[np.ndarray] = None
        self._selected: Dict[int, List[str]] = {}

    def _select(self, design: np.ndarray, response: np.ndarray) -> Tuple[List[int], np.ndarray]:
        n, q = design.shape
        active = [0]
        beta, rss = _rss(design[:, active], response)
        best = _criterion(rss, n, 1, self.selector)
        remaining = list(range(1, q))
        while remaining:
            scores = []
            for column in remaining:
                _, trial = _rss(design[:, active + [column]], response)
                scores.append(_criterion(trial, n, len(active) + 1, self.selector))
            winner = int(np.argmin(scores))
            if scores[winner] >= best:
                break
            best = scores[winner]
            active.append(remaining.pop(winner))
        beta, _ = _rss(design[:, active], response)
        return active, beta

    def fit(self, x_basis: XBasis, x: np.ndarray, targets: np.ndarray) -> "LeastSquaresFitter":
        self.x_basis = x_basis
        design = x_basis.design(x)
        names = x_basis.column_names
        _check_design(design, names)
        coefficients = np.zeros((design.shape[1], targets.shape[1]))
        for j in range(targets.shape[1]):
            if self.selector == "none":
                active = list(range(design.shape[1]))
                beta, _ = _rss(design, targets[:, j])
            else:
                active, beta = self._select(design, targets[:, j])
            coefficients[active, j] = beta
            self._selected[j + 1] = [names[c] for c in active if c != 0]
        self.coefficients = coefficients
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.x_basis.design(x) @ self.coefficients

    def selected_terms(self) -> Dict[int, List[str]]:
        return dict(self._selected)


class KnnFitter(ConditionalMeanFitter):
    """k-nearest-neighbour averages of T_j(z) in covariate-rank space."""

    name = "knn"

    def __init__(self, n_neighbors: int = KNN_NEIGHBORS):
        if n_neighbors < 1:
            raise ConfigError(f"n_neighbors must be positive, got {n_neighbors}")
        self.n_neighbors = n_neighbors
        self.x_basis: Optional[XBasis] = None
        self.model: Optional[KNeighborsRegressor] = None

    def fit(self, x_basis: XBasis, x: np.ndarray, targets: np.ndarray) -> "KnnFitter":
        self.x_basis = x_basis
        ranks = x_basis.ranks(x)
        self.model = KNeighborsRegressor(n_neighbors=min(self.n_neighbors, ranks.shape[0]))
        self.model.fit(ranks, targets)
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.atleast_2d(self.model.predict(self.x_basis.ranks(x)))


class FixedCoefficients(ConditionalMeanFitter):
    """Coefficients that do not depend on x."""

    name = "fixed"
    thresholded = False

    def __init__(self, values: Sequence[float]):
        self.values = np.asarray(values, dtype=float)

    def fit(self, x_basis, x, targets):
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        rows = np.atleast_2d(np.asarray(x, dtype=float)).shape[0]
        return np.tile(self.values, (rows, 1))


def make_fitter(fitter: str = "ols", selector: str = "bic") -> ConditionalMeanFitter:
    if fitter not in FITTERS:
        raise ConfigError(f"Unknown fitter '{fitter}', expected one of {FITTERS}")
    return LeastSquaresFitter(selector) if fitter == "ols" else KnnFitter()


@dataclass(eq=False)
class RelevanceModel:
    """
    Fitted relevance function d_x 🎯

    Holds the z-basis, the fitted coefficient functions x -> LP_{j|x} and the
    density floor. Everything derived from a target profile (coefficients,
    normalizing constant, density at the observed ranks) is cached per x.
    """
    basis: LpBasis
    fitter: ConditionalMeanFitter
    p: int
    selector: str = "bic"
    k: int = DEFAULT_K
    floor: float = DENSITY_FLOOR
    covariate_names: Tuple[str, ...] = ()
    _cache: Dict[tuple, dict] = field(default_factory=dict, init=False, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False)

    @classmethod
    def from_coefficients(cls, basis: LpBasis, coefficients: Sequence[float], p: int = 1,
                          floor: float = DENSITY_FLOOR) -> "RelevanceModel":
        """A model whose LP coefficients are the same at every x."""
        coefficients = np.asarray(coefficients, dtype=float)
        if coefficients.size != basis.m:
            raise ConfigError(f"Expected {basis.m} coefficients, got {coefficients.size}")
        return cls(basis=basis, fitter=FixedCoefficients(coefficients), p=p, selector="fixed", floor=floor)

    @property
    def m(self) -> int:
        return self.basis.m

    @property
    def n(self) -> int:
        return self.basis.n

    @property
    def threshold(self) -> float:
        return 2.0 / np.sqrt(self.n) if self.fitter.thresholded else 0.0

    def _entry(self, x0) -> dict:
        profile = _as_profile(x0, self.p)
        key = tuple(profile.tolist())
        entry = self._cache.get(key)
        if entry is not None:
            return entry
        raw = self.fitter.predict(profile.reshape(1, -1))[0]
        lp = np.where(np.abs(raw) < self.threshold, 0.0, raw)
        flat = not np.any(lp)
        if flat:
            norm = 1.0
        else:
            density = np.maximum(1.0 + self.basis.evaluate_u(UNIT_GRID) @ lp, self.floor)
            norm = float(trapezoid(density, UNIT_GRID))
        entry = {"lp": lp, "flat": flat, "norm": norm}
        with self._lock:
            self._cache.setdefault(key, entry)
        return self._cache[key]

    def coefficients(self, x0) -> np.ndarray:
        """LP_{j|x0}, j = 1..m, after small-coefficient zeroing."""
        return self._entry(x0)["lp"].copy()

    def is_flat(self, x0) -> bool:
        return self._entry(x0)["flat"]

    def raw_density(self, x0, u) -> np.ndarray:
        """1 + sum_j LP_{j|x0} T_j(u), before flooring."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        lp = self._entry(x0)["lp"]
        return 1.0 + self.basis.evaluate_u(u) @ lp

    def density(self, x0, u) -> np.ndarray:
        """Floored d_x0(u) normalized to unit integral over [0, 1]."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        entry = self._entry(x0)
        if entry["flat"]:
            return np.ones_like(u)
        return np.maximum(self.raw_density(x0, u), self.floor) / entry["norm"]

    def floor_reached(self, x0, u) -> np.ndarray:
        return self.raw_density(x0, u) < self.floor

    def cdf(self, x0, u) -> np.ndarray:
        """D_x0(u) by cumulative trapezoid of the density on the unit grid."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if self.is_flat(x0):
            return np.clip(u, 0.0, 1.0)
        grid_cdf = self.grid_cdf(x0)
        return np.interp(u, UNIT_GRID, grid_cdf)

    def _cached(self, x0, key: str, compute):
        """Per-profile cached value; computed outside the lock, first writer wins."""
        entry = self._entry(x0)
        if key not in entry:
            value = compute(entry)
            with self._lock:
                entry.setdefault(key, value)
        return entry[key]

    def grid_cdf(self, x0) -> np.ndarray:
        def compute(entry: dict) -> np.ndarray:
            values = cumulative_trapezoid(self.density(x0, UNIT_GRID), UNIT_GRID, initial=0.0)
            return values / values[-1]
        return self._cached(x0, "cdf", compute)

    def sample_density(self, x0) -> np.ndarray:
        """d_x0 at the observed ranks of the sorted sample."""
        return self._cached(x0, "sample", lambda entry: self.density(x0, self.basis.cdf(self.basis.sorted_z)))

    def max_relevance(self, x0) -> float:
        """max_u d_x0(u) over an equispaced grid in [1/(2N), 1-1/(2N)] and the observed ranks."""
        def compute(entry: dict) -> float:
            if entry["flat"]:
                return 1.0
            grid = np.linspace(0.5 / self.n, 1.0 - 0.5 / self.n, MAX_GRID_SIZE)
            return float(max(np.max(self.density(x0, grid)), np.max(self.sample_density(x0))))
        return self._cached(x0, "max", compute)

    def cust(self, x0) -> float:
        return float(np.sum(self.coefficients(x0) ** 2))

    def rel(self, x0) -> float:
        return 1.0 / (1.0 + self.cust(x0))

    def n_rel(self, x0, n: Optional[int] = None) -> float:
        return (self.n if n is None else n) * self.rel(x0)

    def selected_terms(self) -> Dict[int, List[str]]:
        return self.fitter.selected_terms()


def fit_relevance(data: Dataset, m: int = DEFAULT_M, selector: str = "bic", k: int = DEFAULT_K,
                  fitter: str = "ols") -> RelevanceModel:
    """
    Regress each T~_j(z_i) on the rank basis of x and return the fitted
    relevance model.
    """
    try:
        logger.debug(f"Fitting relevance: n={data.n}, p={data.p}, m={m}, k={k}, selector={selector}, fitter={fitter}")
        if k < 1:
            raise ConfigError(f"x-basis degree k must be at least 1, got {k}")
        if data.n <= m * k + 1:
            raise DataError(f"Relevance fit needs more than {m * k + 1} records, got {data.n}")
        engine = make_fitter(fitter, selector)
        basis = build_basis(data.z, m)
        x_basis = build_x_basis(data.x, k, data.covariate_names)
        engine.fit(x_basis, data.x, basis.values)
        model = RelevanceModel(basis=basis, fitter=engine, p=data.p, selector=selector, k=k,
                               covariate_names=data.covariate_names)
        logger.info({"n": data.n, "m": m, "selected": model.selected_terms(), "message": "Relevance model fitted"})
        return model
    except (ConfigError, DataError, NumericalError) as e:
        logger.error({"error": str(e), "message": "Failed to fit relevance model"})
        raise
    except np.linalg.LinAlgError as e:
        logger.error({"error": str(e), "message": "Least-squares failure while fitting relevance"})
        raise NumericalError(f"Relevance regression failed: {e}") from e


def relevance_density(model: RelevanceModel, x0, u_grid) -> np.ndarray:
    """
    d_x0 on `u_grid`: floored at the model's epsilon and renormalized to
    unit trapezoid integral on that grid.
    """
    u_grid = np.asarray(u_grid, dtype=float)
    if model.is_flat(x0):
        return np.ones_like(u_grid)
    values = np.maximum(model.raw_density(x0, u_grid), model.floor)
    return values / trapezoid(values, u_grid)


def cust(model: RelevanceModel, x0) -> float:
    return model.cust(x0)


def n_rel(model: RelevanceModel, x0, n: int) -> float:
    if n < 1:
        raise ConfigError(f"Sample size must be positive, got {n}")
    return model.n_rel(x0, n)


def relevance_table(model: RelevanceModel, targets) -> pd.DataFrame:
    """CUST, rel and N_rel over target profiles, one row per target."""
    rows = []
    names = model.covariate_names or tuple(f"x{c + 1}" for c in range(model.p))
    for target in np.asarray(targets, dtype=float).reshape(-1, model.p):
        row = dict(zip(names, target))
        value = model.cust(target)
        row.update({"cust": value, "rel": 1.0 / (1.0 + value), "n_rel": model.n_rel(target),
                    "status": "flat" if model.is_flat(target) else "customized"})
        rows.append(row)
    return pd.DataFrame(rows)


@dataclass(frozen=True, eq=False)
class RelevanceBands:
    """Bootstrap summary of d_x on a u-grid."""
    x0: np.ndarray
    u: np.ndarray
    estimate: np.ndarray
    sd: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    replicates: int
    skipped: int

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"u": self.u, "d": self.estimate, "sd": self.sd,
                             "lower": self.lower, "upper": self.upper})


def bootstrap_relevance(data: Dataset, x0, B: int = BOOTSTRAP_B, seed: int = 1, m: int = DEFAULT_M,
                        selector: str = "bic", k: int = DEFAULT_K, fitter: str = "ols",
                        u_grid: Optional[np.ndarray] = None) -> RelevanceBands:
    """
    Nonparametric bootstrap of d_x0: B resample-with-replacement refits,
    pointwise sd and 2.5/97.5 percentile bands. Degenerate resamples are
    skipped and counted.
    """
    if B < 2:
        raise ConfigError(f"Bootstrap needs B >= 2 replicates, got {B}")
    u_grid = np.linspace(0.01, 0.99, 99) if u_grid is None else np.asarray(u_grid, dtype=float)
    logger.debug(f"Bootstrapping relevance at x0={x0} with B={B}, seed={seed}")
    model = fit_relevance(data, m, selector, k, fitter)
    estimate = model.density(x0, u_grid)

    def replicate(b: int) -> Optional[np.ndarray]:
        rng = derive_stream(seed, "bootstrap", b).generator
        rows = rng.integers(0, data.n, data.n)
        try:
            refit = fit_relevance(data.subset(rows), m, selector, k, fitter)
            return refit.density(x0, u_grid)
        except (NumericalError, DataError) as e:
            logger.warning({"replicate": b, "error": str(e), "message": "Bootstrap replicate skipped"})
            return None

    with ThreadPoolExecutor(max_workers=get_max_workers()) as pool:
        curves = list(pool.map(replicate, range(B)))
    kept = [curve for curve in curves if curve is not None]
    skipped = B - len(kept)
    if len(kept) < 2:
        raise NumericalError(f"Only {len(kept)} of {B} bootstrap replicates succeeded")
    stack = np.vstack(kept)
    bands = RelevanceBands(
        x0=_as_profile(x0, data.p), u=u_grid, estimate=estimate, sd=stack.std(axis=0, ddof=1),
        lower=np.percentile(stack, 2.5, axis=0), upper=np.percentile(stack, 97.5, axis=0),
        replicates=len(kept), skipped=skipped,
    )
    logger.info({"x0": bands.x0.tolist(), "replicates": len(kept), "skipped": skipped, "message": "Relevance bootstrap finished"})
    return bands
