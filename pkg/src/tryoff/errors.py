"""Error taxonomy shared across the package.

Each class maps to one CLI exit code (see cli.EXIT_CODES) so scripted
callers can distinguish failure categories.
"""


class TryoffError(Exception):
    """Base class for all package errors."""


class DimensionError(TryoffError, ValueError):
    """Shape/axis mismatch between tensors or images."""


class ConfigError(TryoffError, ValueError):
    """Invalid configuration value (unknown case, bad range, bad step count)."""


class ContractError(TryoffError, ValueError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


class RangeError(ConfigError):
    """A value (e.g. a timestep) lies outside its permitted interval."""


class StateError(TryoffError, RuntimeError):
    """Required state is missing (no checkpoint, untrained model)."""


class NumericalError(TryoffError, ArithmeticError):
    """Numerical precondition violated beyond tolerance (e.g. non-PSD covariance)."""


class SizeError(TryoffError, ValueError):
    """Too few samples / image too small for the requested computation."""


class PairingError(TryoffError, ValueError):
    """Directory contents do not pair up; message lists unmatched names."""


class DataError(TryoffError, IOError):
    """Unreadable or corrupted input data; message names the file."""
