"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class ConfigError(Exception):
    """Invalid configuration or contradictory options."""


class DataError(Exception):
    """Malformed, inconsistent, or missing data artifacts."""


class NumericError(Exception):
    """Non-finite values where finite ones are required (e.g. diverged loss)."""
