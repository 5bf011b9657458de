"""Shared exception types, mapped to CLI exit codes in dwropt.cli."""


class ConfigurationError(ValueError):
    """Invalid configuration or incompatible discretization parameters."""


class OutOfDomainError(ValueError):
    """A query point lies outside the domain or a raster extent."""


class NumericalError(RuntimeError):
    """Numerical failure: singular system or diverging iteration."""


class SingularOperatorError(NumericalError):
    """A sparse factorization failed."""


class ResourceCapError(RuntimeError):
    """A configured resource cap (degree-of-freedom count) would be exceeded."""
