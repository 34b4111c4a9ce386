"""Exception types shared across the package."""

from __future__ import annotations


class SphereRegError(Exception):
    """Base class for all package errors."""


class DomainError(SphereRegError, ValueError):
    """An input lies outside the domain of an operation."""


class PoleError(DomainError):
    """An input sits exactly on a singular point of a map."""


class AntipodalError(DomainError):
    """Two unit vectors are (numerically) antipodal."""


class DegenerateError(DomainError):
    """A formula is undefined because some intermediate quantity vanishes."""


class ValidationError(SphereRegError, ValueError):
    """Input data or parameters fail a structural check."""


class ConvergenceError(SphereRegError, RuntimeError):
    """An optimizer finished without satisfying its constraints."""
