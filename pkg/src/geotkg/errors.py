"""Exception hierarchy. Each class carries the CLI exit code for its category."""


class GeoTKGError(Exception):
    exit_code = 1


class DomainError(GeoTKGError, ValueError):
    """Input outside the admissible domain (bounds, kinds, ranges)."""

    exit_code = 2


class SingularityError(DomainError):
    """A gradient formula was evaluated at a singular configuration."""

    exit_code = 3


class EmptySupport(GeoTKGError):
    """No observed events back the requested empirical quantity."""

    exit_code = 4


class DegenerateFeatures(GeoTKGError):
    """Feature matrix fails rank or conditioning checks."""

    exit_code = 5


class IrreparableDegeneracy(DegenerateFeatures):
    exit_code = 6


class InfeasibleConstraints(GeoTKGError):
    exit_code = 7


class DataFormatError(GeoTKGError, ValueError):
    exit_code = 8


class TrainingAborted(GeoTKGError):
    """Non-finite gradients or other unrecoverable optimizer state."""

    exit_code = 9
