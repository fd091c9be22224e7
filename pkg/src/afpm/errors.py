"""Exception taxonomy; the CLI maps each class to a distinct exit code."""


class AfpmError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(AfpmError):
    """Invalid or inconsistent configuration (unknown keys, bad values)."""


class DataError(AfpmError):
    """Invalid data on disk or violated data invariants."""


class NumericError(AfpmError):
    """Numerical failure: non-finite values, degenerate matrices, divergence."""
