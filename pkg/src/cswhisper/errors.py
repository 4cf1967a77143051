"""Exception hierarchy shared by every module."""


class CSWhisperError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CSWhisperError, ValueError):
    """Inconsistent hyperparameters, shapes or variant flags."""


class InputError(CSWhisperError, ValueError):
    """Malformed runtime input (empty sequences, non-finite values, ...)."""


class FeasibilityError(CSWhisperError, ValueError):
    """A CTC target cannot be aligned to the available frames."""


class ValidationError(CSWhisperError, ValueError):
    """Data record violates a declared invariant."""


class ParseError(CSWhisperError, ValueError):
    """A manifest line could not be parsed."""

    def __init__(self, message, line=None, field=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        if where:
            message = f"{', '.join(where)}: {message}"
        super().__init__(message)
        self.line = line
        self.field = field
