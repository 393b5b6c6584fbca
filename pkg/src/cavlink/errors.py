"""Exception types shared across the package.

The CLI maps these onto process exit codes (see cli.py), so library code
should raise the most specific type that applies.
"""


class CavlinkError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CavlinkError):
    """Invalid configuration value, file, or precondition violation."""


class ModelMissingError(CavlinkError):
    """A trained model file required by the requested variant is absent."""


class NumericalAbortError(CavlinkError):
    """Training or sampling produced non-finite values or diverged."""
