"""Exception types shared across the package."""


class PAEError(Exception):
    """Base class for package errors."""


class ShapeError(PAEError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(PAEError, ValueError):
    """A scalar parameter lies outside its valid range."""


class ContractError(PAEError, RuntimeError):
    """A caller violated an operation's precondition."""


class NumericError(PAEError, FloatingPointError):
    """A computation produced non-finite values or failed to converge."""


class MetricError(PAEError, ValueError):
    """A metric is undefined for the given inputs."""


class ConfigError(ParameterError):
    """A configuration field is missing or invalid; ``field`` names it."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
