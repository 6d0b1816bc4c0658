"""Exception classes shared by the library and the command line.

Each class maps to a stable CLI exit code.
"""


class LaserError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 3


class ConfigError(LaserError, ValueError):
    """Invalid parameters or usage."""

    exit_code = 1


class DataError(LaserError, ValueError):
    """Malformed input data or violated dataset invariants."""

    exit_code = 2


class NumericalError(LaserError, RuntimeError):
    """Rank deficiency, singular designs, non-convergence and similar failures."""

    exit_code = 3
