"""Exception types shared across the package."""

from __future__ import annotations


class VCMError(Exception):
    """Base class for all package errors."""


class FormatError(VCMError, ValueError):
    """Malformed or unsupported VOL1 container / checkpoint archive."""


class ParameterError(VCMError, ValueError):
    """An argument is outside its valid domain."""


class ShapeError(VCMError, ValueError):
    """Tensor or volume shapes do not agree."""


class ConfigError(VCMError, ValueError):
    """Invalid run configuration, modality list or drop configuration."""


class NumericError(VCMError, ArithmeticError):
    """Non-finite values or an out-of-domain numeric quantity."""


class StateError(VCMError, RuntimeError):
    """An object is used before it is ready (e.g. unloaded parameters)."""
