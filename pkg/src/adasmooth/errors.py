"""Exception types shared across the toolkit."""


class AdasmoothError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(AdasmoothError, ValueError):
    """Array dimensions do not chain or do not match a declared shape."""


class NumericalError(AdasmoothError, ArithmeticError):
    """A NaN/Inf appeared where finite values are required (e.g. training divergence)."""


class FormatError(AdasmoothError, ValueError):
    """A serialized file (IDX, net checkpoint, CSV) is malformed."""


class ConfigError(AdasmoothError, ValueError):
    """Invalid configuration value or inconsistent option combination."""


class CertificationError(AdasmoothError, ValueError):
    """A certificate was requested outside the conditions that make it valid."""
