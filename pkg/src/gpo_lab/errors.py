"""Exception types shared across the package."""


class GPOError(Exception):
    """Base class for all package errors."""


class SaturationError(GPOError, ValueError):
    """An executed action sits numerically on the squash boundary |a~/beta| -> 1."""


class NumericalError(GPOError, ArithmeticError):
    """A loss or gradient evaluated to a non-finite value."""


class NonFiniteInput(GPOError, ValueError):
    """An environment received NaN or infinite inputs."""


class PreconditionError(GPOError, ValueError):
    """A verification routine was called outside its stated preconditions."""


class ConfigError(GPOError, ValueError):
    """A run configuration could not be parsed or failed validation."""
