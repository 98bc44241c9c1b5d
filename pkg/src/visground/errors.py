"""Exception hierarchy shared across the package."""


class GroundingError(Exception):
    """Base class for all package errors."""


class DimensionError(GroundingError, ValueError):
    pass


class ContractError(GroundingError, ValueError):
    """A documented precondition was violated."""


class NumericError(GroundingError, ArithmeticError):
    pass


class ConfigError(GroundingError, ValueError):
    pass


class VocabularyError(GroundingError, KeyError):
    pass


class LengthError(GroundingError, ValueError):
    pass


class GenerationError(GroundingError, RuntimeError):
    pass


class FormatError(GroundingError, ValueError):
    """Malformed dataset or checkpoint file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)
