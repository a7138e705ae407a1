"""Exception hierarchy shared by every module."""


class MagnetoError(Exception):
    """Base class for all package errors."""


class ContractError(MagnetoError, ValueError):
    """An operation was called outside its documented preconditions."""


class DimensionError(MagnetoError, ValueError):
    pass


class UnsupportedPrimitiveError(MagnetoError, ValueError):
    pass


class VocabularyError(MagnetoError, ValueError):
    pass


class ParameterError(MagnetoError, ValueError):
    """Parameter store does not match the expected schema."""


class ConfigurationError(MagnetoError, ValueError):
    pass


class DataFormatError(MagnetoError, ValueError):
    """A dataset, vocabulary or checkpoint file could not be parsed."""

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        if where:
            message = f"{', '.join(where)}: {message}"
        super().__init__(message)


class GenerationError(MagnetoError, ValueError):
    pass


class NonFiniteLossError(MagnetoError, RuntimeError):
    def __init__(self, epoch, batch, value):
        self.epoch = epoch
        self.batch = batch
        self.value = value
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")
