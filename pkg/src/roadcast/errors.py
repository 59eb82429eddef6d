"""Shared exception types."""


class RoadcastError(Exception):
    """Base class for all package errors."""


class DimensionError(RoadcastError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ParameterError(RoadcastError, ValueError):
    """An argument violates a documented precondition."""


class ParseError(RoadcastError, ValueError):
    """A data file is malformed; message names the offending location."""


class ConfigError(RoadcastError, ValueError):
    """Model/training configuration is internally inconsistent."""


class DivergenceError(RoadcastError, RuntimeError):
    """Training produced a non-finite loss."""
