"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: configuration/data problems exit 2,
numerical failures exit 3.
"""


class UsrnError(Exception):
    """Base class for all package errors."""


class ConfigurationError(UsrnError):
    """Invalid wiring: shape mismatches, bad hyperparameters, bad flag combos."""


class DataError(UsrnError):
    """Invalid values inside otherwise well-formed containers."""


class GenerationError(DataError):
    """Synthetic data request that cannot be satisfied."""


class NumericalError(UsrnError):
    """Non-finite values where finite ones are required; training aborts."""
