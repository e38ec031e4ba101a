"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
NumericError -> 3, I/O and format problems -> 4.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration / arguments."""


class DomainError(ConfigError):
    """An argument is outside the mathematical domain of an operation."""


class NumericError(RuntimeError):
    """A numerical procedure failed (non-convergence, non-finite values)."""


class ResourceError(NumericError):
    """A computation would exceed configured memory / grid limits."""


class FormatError(ValueError):
    """A file does not conform to its expected binary/text format."""
