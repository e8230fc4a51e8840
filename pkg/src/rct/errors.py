"""Exception types shared across the package."""


class RCTError(Exception):
    """Base class for all package errors."""


class FormatError(RCTError):
    """Malformed or unsupported file contents."""


class NumericalError(RCTError):
    """Non-finite values where finite ones are required."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class ConfigError(RCTError, ValueError):
    """Invalid configuration or argument value."""


class ShapeError(RCTError, ValueError):
    """Array shapes that do not line up."""


class DomainError(RCTError, ValueError):
    """Values outside the admissible range of an operation."""


class ParseError(RCTError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class StateError(RCTError):
    """Mismatched cache, checkpoint or configuration state."""


class IoError(RCTError, OSError):
    pass
