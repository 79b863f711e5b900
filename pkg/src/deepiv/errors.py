"""Exception types shared across the package."""


class DeepIVError(Exception):
    """Base class for all package errors."""


class DimensionError(DeepIVError, ValueError):
    """Array shapes do not line up."""


class NumericError(DeepIVError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class ParameterError(DeepIVError, ValueError):
    """An argument is outside its documented range."""


class DomainError(DeepIVError, ValueError):
    """A value is outside the support of a distribution."""


class ConditioningError(DeepIVError, ArithmeticError):
    """A linear system is singular or too ill-conditioned to solve."""

    def __init__(self, message: str, condition_number: float = float("inf")):
        super().__init__(f"{message} (condition number {condition_number:.3g})")
        self.condition_number = condition_number


class StreamReuseError(DeepIVError, AssertionError):
    """Two Monte-Carlo integrals were fed from the same random stream."""


class SchemaError(DeepIVError, ValueError):
    """A dataset file violates the column schema."""


class ConfigError(DeepIVError, ValueError):
    """A configuration field is missing, unknown, or out of range."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
