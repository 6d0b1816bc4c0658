from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence
import numpy as np
import pandas as pd
from src.config import PROPOSAL_CAP, MIN_ACCEPTANCE, PROPOSAL_BATCH, Z_COLUMN, get_max_workers
from src.dataset import Dataset
from src.errors import ConfigError, DataError, NumericalError
from src.relevance import RelevanceModel
from src.rng import RngStream, derive_stream
from src.logger import get_logger

# Configure logging
logger = get_logger(__name__)


@dataclass(frozen=True, eq=False)
class LaserSample:
    """
    Artificial relevant sample at a target profile 🔦

    `samples` are drawn from the observed scores; `flat` marks the
    short-circuit where the whole data set is returned unchanged.
    """
    x0: np.ndarray
    samples: np.ndarray
    proposals: int
    acceptance_rate: float
    seed: int
    flat: bool
    stream_index: int = 0

    @property
    def n(self) -> int:
        return int(self.samples.size)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({Z_COLUMN: self.samples})

    def summary(self) -> dict:
        return {
            "x0": self.x0.tolist(),
            "n": self.n,
            "proposals": self.proposals,
            "acceptance_rate": self.acceptance_rate,
            "flat": self.flat,
            "seed": self.seed,
            "stream_index": self.stream_index,
        }


def max_relevance(model: RelevanceModel, x0) -> float:
    """Upper envelope max_u d_x0(u) used by the accept-reject step."""
    return model.max_relevance(x0)


def generate_laser(data: Dataset, model: RelevanceModel, x0, n: Optional[int] = None, seed: int = 1,
                   stream: Optional[RngStream] = None) -> LaserSample:
    """
    Accept-reject draw of n scores targeted at x0.

    A flat relevance function returns the observed scores verbatim.
    Otherwise a proposal z' is drawn uniformly from the sample and kept when
    d_x0(F~(z')) > U * max_u d_x0(u), until n proposals are accepted.
    """
    try:
        profile = np.atleast_1d(np.asarray(x0, dtype=float))
        n = data.n if n is None else int(n)
        logger.debug(f"Generating LASER at x0={profile.tolist()} with n={n}, seed={seed}")
        if n < 1:
            raise ConfigError(f"LASER size must be at least 1, got {n}")
        if model.n != data.n:
            raise DataError(f"Relevance model was fitted on {model.n} scores, data has {data.n}")
        stream = stream or derive_stream(seed, "laser")

        if model.is_flat(profile):
            logger.info({"x0": profile.tolist(), "n": data.n, "message": "Flat relevance, returning full data"})
            return LaserSample(x0=profile, samples=np.array(data.z), proposals=0, acceptance_rate=1.0,
                               seed=stream.seed, flat=True, stream_index=stream.index)

        pool = model.basis.sorted_z
        weights = model.sample_density(profile)
        bound = model.max_relevance(profile)
        if not np.isfinite(bound) or bound <= 0:
            raise NumericalError(f"Relevance maximum is {bound} at x0={profile.tolist()}")

        rng = stream.generator
        accepted: List[np.ndarray] = []
        count = 0
        proposals = 0
        while count < n:
            index = rng.integers(0, pool.size, PROPOSAL_BATCH)
            uniform = rng.random(PROPOSAL_BATCH)
            keep = weights[index] > uniform * bound
            hits = np.flatnonzero(keep)
            if count + hits.size >= n:
                last = hits[n - count - 1]
                accepted.append(pool[index[hits[: n - count]]])
                proposals += int(last) + 1
                count = n
                break
            accepted.append(pool[index[hits]])
            count += hits.size
            proposals += PROPOSAL_BATCH
            if proposals >= PROPOSAL_CAP and count / proposals < MIN_ACCEPTANCE:
                raise NumericalError(
                    f"Pathological relevance density: acceptance {count / proposals:.2e} after {proposals} proposals"
                )

        sample = LaserSample(x0=profile, samples=np.concatenate(accepted), proposals=proposals,
                             acceptance_rate=n / proposals, seed=stream.seed, flat=False,
                             stream_index=stream.index)
        logger.info({"x0": profile.tolist(), "n": n, "acceptance_rate": sample.acceptance_rate, "message": "LASER generated"})
        return sample
    except (ConfigError, DataError, NumericalError) as e:
        logger.error({"error": str(e), "message": "LASER generation failed"})
        raise


def generate_lasers(data: Dataset, model: RelevanceModel, targets: Sequence, n: Optional[int] = None,
                    seed: int = 1) -> List[LaserSample]:
    """One LASER per target on a bounded worker pool; target i uses stream ('laser', i)."""
    profiles = np.asarray(targets, dtype=float).reshape(-1, model.p)

    def task(i: int) -> LaserSample:
        return generate_laser(data, model, profiles[i], n, seed, stream=derive_stream(seed, "laser", i))

    with ThreadPoolExecutor(max_workers=get_max_workers()) as workers:
        return list(workers.map(task, range(profiles.shape[0])))
