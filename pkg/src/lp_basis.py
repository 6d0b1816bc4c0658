from dataclasses import dataclass
from typing import Union
import numpy as np
from numpy.polynomial import polynomial as P
from scipy.stats import rankdata
from src.config import DEFAULT_M, RANK_TOL
from src.errors import ConfigError, DataError, NumericalError
from src.logger import get_logger

# Configure logging
logger = get_logger(__name__)

ArrayLike = Union[float, np.ndarray]


def empirical_cdf(z: np.ndarray) -> np.ndarray:
    """
    Rank-probabilities F~(z_i) = rank(z_i)/N with midranks for ties.
    """
    z = np.asarray(z, dtype=float).reshape(-1)
    if z.size == 0:
        raise DataError("empirical_cdf needs at least one value")
    if not np.all(np.isfinite(z)):
        raise DataError("empirical_cdf needs finite values")
    return rankdata(z, method="average") / z.size


def rank_lookup(sorted_values: np.ndarray, values: ArrayLike) -> np.ndarray:
    """Midrank/N for values found in `sorted_values`, clamped (#<=v)/N otherwise."""
    values = np.atleast_1d(np.asarray(values, dtype=float))
    n = sorted_values.size
    n_le = np.searchsorted(sorted_values, values, side="right")
    n_lt = np.searchsorted(sorted_values, values, side="left")
    n_eq = n_le - n_lt
    outside = np.clip(n_le / n, 0.5 / n, 1.0 - 0.5 / n)
    inside = (n_lt + (n_eq + 1) / 2.0) / n
    return np.where(n_eq > 0, inside, outside)


@dataclass(frozen=True, eq=False)
class LpBasis:
    """
    Empirical rank-polynomial system T~_1..T~_m of a score sample.

    Each T~_j is a degree-j polynomial in the standardized rank variable
    u~ = (F~ - u_mean) / u_sd; `coefficients[j-1]` holds its power-series
    coefficients in u~ (length m+1). `values` are the basis functions at the
    sample points in input order.
    """
    m: int
    n: int
    sorted_z: np.ndarray
    u_mean: float
    u_sd: float
    coefficients: np.ndarray
    values: np.ndarray

    @property
    def leading_coefficients(self) -> np.ndarray:
        return np.array([self.coefficients[j, j + 1] for j in range(self.m)])

    def cdf(self, z_new: ArrayLike) -> np.ndarray:
        """
        F~ at arbitrary points. Values present in the sample map to their
        midrank/N; other points use (#sample <= z)/N clamped to
        [1/(2N), 1 - 1/(2N)].
        """
        return rank_lookup(self.sorted_z, z_new)

    def evaluate_u(self, u: ArrayLike) -> np.ndarray:
        """Basis functions at rank-probabilities u; shape (len(u), m)."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        standardized = (u - self.u_mean) / self.u_sd
        return P.polyvander(standardized, self.m) @ self.coefficients.T

    def evaluate(self, z_new: ArrayLike) -> np.ndarray:
        """
        (T~_1(z), ..., T~_m(z)) at new scores through F~. A scalar input gives
        an (m,) vector, an array input an (n, m) matrix.
        """
        values = self.evaluate_u(self.cdf(z_new))
        return values[0] if np.ndim(z_new) == 0 else values


def build_basis(z: np.ndarray, m: int = DEFAULT_M) -> LpBasis:
    """
    Gram-Schmidt the powers of the standardized rank variable under the
    empirical measure (modified Gram-Schmidt, two passes).
    """
    try:
        z = np.asarray(z, dtype=float).reshape(-1)
        logger.debug(f"Building LP basis with m={m} on {z.size} scores")
        if m < 1:
            raise ConfigError(f"Basis size m must be at least 1, got {m}")
        u = empirical_cdf(z)
        distinct = np.unique(z).size
        if m >= distinct:
            raise NumericalError(f"Rank deficiency: m={m} needs more than {m} distinct values, got {distinct}")

        u_mean = float(np.mean(u))
        u_sd = float(np.std(u))
        standardized = (u - u_mean) / u_sd
        monomials = P.polyvander(standardized, m)
        q = np.zeros_like(monomials)
        coefficients = np.zeros((m + 1, m + 1))
        q[:, 0] = 1.0
        coefficients[0, 0] = 1.0
        for degree in range(1, m + 1):
            vector = monomials[:, degree].copy()
            coef = np.zeros(m + 1)
            coef[degree] = 1.0
            for _ in range(2):
                for k in range(degree):
                    projection = np.mean(vector * q[:, k])
                    vector -= projection * q[:, k]
                    coef -= projection * coefficients[k]
            norm = np.sqrt(np.mean(vector ** 2))
            if not np.isfinite(norm) or norm < RANK_TOL:
                raise NumericalError(f"Rank deficiency while orthonormalizing degree {degree}")
            q[:, degree] = vector / norm
            coefficients[degree] = coef / norm

        basis = LpBasis(
            m=m,
            n=z.size,
            sorted_z=np.sort(z),
            u_mean=u_mean,
            u_sd=u_sd,
            coefficients=coefficients[1:],
            values=q[:, 1:],
        )
        logger.info({"m": m, "n": z.size, "distinct": distinct, "message": "LP basis built"})
        return basis
    except (ConfigError, NumericalError, DataError) as e:
        logger.error({"error": str(e), "message": "Failed to build LP basis"})
        raise
