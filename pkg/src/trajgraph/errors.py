"""Exception types shared across the package.

The CLI maps these onto process exit codes, so library code should raise
the most specific class that applies.
"""


class TrajGraphError(Exception):
    """Base class for all package errors."""


class ConfigError(TrajGraphError):
    """Invalid configuration value, unknown key, or inconsistent setting."""


class ShapeError(TrajGraphError):
    """Array shapes incompatible with an operation's contract."""


class ContractError(TrajGraphError):
    """A documented precondition was violated by the caller."""


class DataError(TrajGraphError):
    """Malformed or inconsistent dataset content."""


class GenerationError(TrajGraphError):
    """Synthetic data generation diverged or produced unusable output."""


class NumericalError(TrajGraphError):
    """Non-finite values encountered where finite ones are required."""
