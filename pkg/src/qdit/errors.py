"""Exception hierarchy. ``ConfigError`` maps to CLI exit code 2, ``NumericError`` to 3."""


class QDiTError(Exception):
    pass


class ConfigError(QDiTError, ValueError):
    pass


class NumericError(QDiTError, ArithmeticError):
    pass


class ValidationError(NumericError, ValueError):
    pass


class DimensionError(NumericError, ValueError):
    pass


class DomainError(NumericError):
    pass


class ConvergenceError(NumericError):
    pass


class NotPositiveDefiniteError(NumericError):
    pass


class BundleError(QDiTError, OSError):
    """Unreadable or malformed model bundle; carries the byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
