"""Exception types raised across the toolkit."""


class ReparamError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(ReparamError, ValueError):
    """Tensor shapes do not line up."""


class ConfigError(ReparamError, ValueError):
    """Invalid configuration or argument combination."""


class PreconditionError(ReparamError, ValueError):
    """An input violates an operation's precondition."""


class DataError(ReparamError, ValueError):
    """Stored or computed data is invalid (negative variance, bad file, ...)."""


class InputError(ReparamError, ValueError):
    """Rejected external input such as an unsupported audio file."""


class NonFiniteError(ReparamError, FloatingPointError):
    """A forward op produced NaN or Inf."""


class CacheMissError(ReparamError, KeyError):
    """A (sample, epoch) pair is absent from a logits cache."""
