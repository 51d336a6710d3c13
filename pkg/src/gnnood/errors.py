"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class GnnOodError(Exception):
    exit_code = 1


class ConfigError(GnnOodError, ValueError):
    exit_code = 2


class ShapeError(GnnOodError, ValueError):
    exit_code = 2


class ProtocolError(GnnOodError, ValueError):
    """An evaluation or data-access contract was broken (empty mask, seed mismatch, ...)."""

    exit_code = 2


class UsageError(GnnOodError, RuntimeError):
    exit_code = 2


class DataError(GnnOodError, ValueError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericalError(GnnOodError, ArithmeticError):
    exit_code = 4
