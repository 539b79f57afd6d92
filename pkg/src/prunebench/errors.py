"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class FormatError(ValueError):
    """A file on disk does not follow the expected binary or text layout."""


class ScheduleExhaustedError(RuntimeError):
    """Pruning cannot proceed because no removable units remain."""


class StartingPointNotFoundError(LookupError):
    pass


class CalibrationError(RuntimeError):
    pass


class ConfigError(ContractError):
    """A configuration file is malformed or names an invalid value."""
