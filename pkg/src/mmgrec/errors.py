"""Exception types raised across the package."""


class MMGRecError(Exception):
    pass


class ShapeError(MMGRecError, ValueError):
    pass


class ParseError(MMGRecError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DataError(MMGRecError, ValueError):
    pass


class ProtocolError(MMGRecError, ValueError):
    pass


class SamplingError(MMGRecError, ValueError):
    pass


class FormatError(MMGRecError, ValueError):
    pass


class ConfigError(MMGRecError, ValueError):
    pass


class NumericError(MMGRecError, ArithmeticError):
    pass
