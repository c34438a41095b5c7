"""Exception types shared across the package."""


class ContractError(ValueError):
    """An argument violates a documented precondition (shape, range, pairing)."""


class ConfigError(ValueError):
    """A configuration value is missing, unknown or inconsistent."""


class UnsupportedRateError(ValueError):
    """A frame-rate conversion that is not an integer multiple was requested."""


class MotionParseError(ValueError):
    """A motion file could not be decoded; the message names the offending field."""


class StageOrderError(RuntimeError):
    """A pipeline stage was run before the artifact it depends on exists."""
