"""Exception types shared across the package.

Every error raised on bad input derives from TerravoxError so callers can
catch one base type at the CLI boundary.
"""


class TerravoxError(Exception):
    """Base class for all package errors."""


class ConfigurationError(TerravoxError):
    """Mismatched shapes, frames, resolutions, or invalid parameter values."""


class InvalidMeasurementError(TerravoxError):
    """A measurement violates its contract (e.g. non-positive capture range)."""


class InsufficientDataError(TerravoxError):
    """Not enough input to produce a meaningful result."""


class ImplausibleSurfaceError(TerravoxError):
    """A fitted surface fails a physical plausibility gate."""


class CorruptMaskError(TerravoxError):
    """A label mask contains indices outside its ontology."""
