"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, NumericError -> 3,
plain OSError -> 4.
"""


class ConfigError(ValueError):
    """Invalid configuration value (bad ratio, malformed schedule, ...)."""


class DimensionError(ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class NumericError(ArithmeticError):
    """A computation produced NaN/Inf or otherwise went numerically bad."""


class UsageError(RuntimeError):
    """API misuse: backward on a non-scalar, double backward, and so on."""


class ScheduleParseError(ConfigError):
    """Reduction-schedule text did not parse; carries the offending position."""

    def __init__(self, message, position=None):
        super().__init__(message)
        self.position = position
