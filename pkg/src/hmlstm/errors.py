"""Exception types shared across the package."""


class HMLSTMError(Exception):
    pass


class DimensionError(HMLSTMError, ValueError):
    """Operand shapes do not conform."""


class ConfigError(HMLSTMError, ValueError):
    """Invalid hyperparameter or model configuration."""


class UsageError(HMLSTMError, ValueError):
    """An API was called outside its contract."""


class NonFiniteError(HMLSTMError, FloatingPointError):
    """A NaN or Inf appeared in a forward value, loss or gradient."""


class InvariantError(HMLSTMError, AssertionError):
    """An internal invariant was violated."""


class IngestionError(HMLSTMError, OSError):
    """A corpus could not be read or split."""
