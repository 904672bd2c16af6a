"""Exception types shared across the package."""

__all__ = ["FanHmmError", "ValidationError", "UnsupportedCaseError", "InitializationError"]


class FanHmmError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(FanHmmError, ValueError):
    """Invalid user input: data, schema, configuration, or model structure."""


class UnsupportedCaseError(FanHmmError):
    """A well-formed request that the implementation deliberately does not support."""


class InitializationError(FanHmmError):
    """Estimation could not start, e.g. non-finite objective at the initial point."""
