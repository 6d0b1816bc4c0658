import logging
import warnings
import os
from src.config import LOG_FILE, LOG_LEVEL
from src.errors import ConfigError

LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")

# Ignore warnings
warnings.filterwarnings("ignore")

# Ensure log directory exists
if os.path.dirname(LOG_FILE):
    os.makedirs(os.path.dirname(LOG_FILE), exist_ok=True)

# Configure logging
logging.basicConfig(
    filename=LOG_FILE,
    level=getattr(logging, LOG_LEVEL.upper(), logging.INFO),
    format="%(asctime)s - %(levelname)s - %(message)s",
)

# matplotlib and numba write debug chatter through the root logger
for noisy in ("matplotlib", "PIL", "numba"):
    logging.getLogger(noisy).setLevel(logging.WARNING)


def get_logger(name):
    """Return a logger instance."""
    return logging.getLogger(name)


def set_level(level: str) -> None:
    """Change the level of every logger in the package (CLI --log-level)."""
    name = str(level).upper()
    if name not in LEVELS:
        raise ConfigError(f"Unknown log level '{level}', expected one of {LEVELS}")
    logging.getLogger().setLevel(getattr(logging, name))
