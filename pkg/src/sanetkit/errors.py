"""Exception hierarchy shared by every sanetkit module."""


class SanetError(Exception):
    """Base class for all sanetkit errors."""


class DimensionError(SanetError, ValueError):
    """Operand shapes are incompatible with an operation."""


class NumericError(SanetError, ArithmeticError):
    """A non-finite value was produced or consumed."""


class GraphStateError(SanetError, RuntimeError):
    """The differentiation graph is in the wrong state (e.g. already consumed)."""


class ConfigError(SanetError, ValueError):
    """A configuration value violates a structural constraint."""


class DataError(SanetError, ValueError):
    """Input data is malformed (bad label value, bad raster, unknown colour)."""


class PipelineError(SanetError, ValueError):
    """The resample/crop pipeline cannot proceed with the given tile."""


class CheckpointError(SanetError, ValueError):
    """A checkpoint file does not match the expected format or model census."""
