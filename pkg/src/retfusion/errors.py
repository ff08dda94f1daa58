"""Exception types shared across the package."""


class RetfusionError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(RetfusionError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(RetfusionError, ValueError):
    """A configuration value is invalid or unknown."""


class EmptyModalityError(RetfusionError, ValueError):
    """A modality was passed with zero tokens; callers must mask instead."""


class DataError(RetfusionError, ValueError):
    """Base class for malformed input data (files, records, batches)."""


class BadMagicError(DataError):
    """A binary file does not start with the expected magic bytes."""


class SizeMismatchError(DataError):
    """Declared sizes in a binary file disagree with its byte length."""


class NonFiniteError(DataError):
    """NaN or Inf encountered where finite values are required."""


class DuplicateIdError(DataError):
    """An id was added twice to an id-addressed store."""


class UnknownIdError(DataError):
    """An id was referenced that the store does not contain."""


class MissingAnswerError(DataError):
    """An evaluation record lacks the answer string a metric requires."""
