"""Exception types raised across the package."""


class CobraError(Exception):
    """Base class for all package errors."""


class MalformedParameterError(CobraError, ValueError):
    pass


class DimensionError(CobraError, ValueError):
    pass


class InputError(CobraError, ValueError):
    pass


class EvaluationError(CobraError, ValueError):
    pass


class GradientUnavailableError(CobraError, ArithmeticError):
    """Loss was non-finite, so no gradient exists; callers fall back to alpha=0."""


class EncodingError(CobraError, ValueError):
    pass


class FormatError(CobraError, ValueError):
    """Malformed or truncated payload / container."""


class AddressError(CobraError, IndexError):
    """Bit or weight address out of range."""


class UndefinedEfficiencyError(CobraError, ZeroDivisionError):
    pass


class ConfigError(CobraError, ValueError):
    pass


class SelectionError(CobraError, ValueError):
    pass


class OracleTooLargeError(CobraError, ValueError):
    pass


class StageError(CobraError):
    """Wraps a failure inside one stage of the attack pipeline."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
