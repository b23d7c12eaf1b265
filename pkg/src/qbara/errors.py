"""Exception types raised across the package."""


class QbaraError(Exception):
    """Base class for every error raised by qbara."""


class ShapeError(QbaraError, ValueError):
    """Operands have incompatible or non-divisible geometry."""


class ParameterError(QbaraError, ValueError):
    """A configuration or distribution parameter is invalid."""


class DataError(QbaraError, ValueError):
    """Input values are malformed (non-finite, out-of-range codes, short buffers)."""


class CapabilityError(QbaraError):
    """The requested operation is not defined for this configuration."""


class StateError(QbaraError, RuntimeError):
    """An object was used out of sequence, e.g. a stale forward tape."""


class FormatError(QbaraError, ValueError):
    """A serialized record is corrupt, truncated or of the wrong kind."""


class NumericError(QbaraError, ArithmeticError):
    """A computation produced non-finite values or failed a verification tolerance."""
