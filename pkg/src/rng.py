import hashlib
from dataclasses import dataclass, field
from typing import Tuple
import numpy as np
from src.errors import ConfigError
from src.logger import get_logger

# Configure logging
logger = get_logger(__name__)

ALGORITHM = "PCG64"


def _purpose_key(purpose: str) -> int:
    """Stable 32-bit key for a purpose tag (independent of PYTHONHASHSEED)."""
    digest = hashlib.sha256(purpose.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass
class RngStream:
    """
    A reproducible random stream 🎲

    Identified by (master seed, purpose tag, index). The same triple yields the
    same sequence on every platform; distinct triples are independent streams.
    """
    seed: int
    purpose: str = "root"
    index: int = 0
    algorithm: str = ALGORITHM
    _generator: np.random.Generator = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.seed is None:
            raise ConfigError("A seed is required for stochastic operations")
        if int(self.seed) < 0 or int(self.seed) >= 2**64:
            raise ConfigError(f"Seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.index < 0:
            raise ConfigError(f"Stream index must be non-negative, got {self.index}")
        self.seed = int(self.seed)

    @property
    def stream_key(self) -> Tuple[int, int]:
        return (_purpose_key(self.purpose), int(self.index))

    @property
    def generator(self) -> np.random.Generator:
        """Lazily built numpy Generator bound to this stream."""
        if self._generator is None:
            sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream_key)
            self._generator = np.random.Generator(np.random.PCG64(sequence))
            logger.debug(f"Opened stream seed={self.seed} purpose={self.purpose} index={self.index}")
        return self._generator

    def child(self, purpose: str, index: int = 0) -> "RngStream":
        """Derive a sub-stream; the parent's tag is folded into the child's purpose."""
        return RngStream(seed=self.seed, purpose=f"{self.purpose}/{purpose}", index=index)


def derive_stream(seed: int, purpose: str, index: int = 0) -> RngStream:
    """Return the stream for (seed, purpose-tag, index)."""
    return RngStream(seed=seed, purpose=purpose, index=index)
