"""Exception types shared across the package."""


class BrwlabError(Exception):
    """Base class for all package errors."""


class ConfigError(BrwlabError):
    """Invalid or unparseable experiment configuration."""


class UnsupportedDimensionError(BrwlabError):
    """Operation requires a transient walk (d >= 3)."""


class QuadratureResolutionError(BrwlabError):
    """Torus quadrature cannot meet the requested tolerance at the node cap."""


class ExtrapolationError(BrwlabError):
    """Extrapolation ladder did not converge to tolerance."""


class TabulationQualityError(BrwlabError):
    """Too few Monte Carlo samples landed in some tabulation cell."""


class GridCoverageError(BrwlabError):
    """Tabulated input does not span the requested grid and has no tail patch."""


class CriticalityError(BrwlabError):
    """The (alpha, offspring, escape-probability) triple is not critical."""


class InstabilityError(BrwlabError):
    """Time-marching produced non-physical values; refine the step."""


class DerivativeOrderError(BrwlabError):
    """Offspring law does not admit the requested derivative order."""


class CalibrationError(BrwlabError):
    """No admissible calibration exists for the requested inputs."""


class SandwichConstructionError(CalibrationError):
    """Cutoff search for the bracketing offspring laws failed."""


class InsufficientSurvivorsError(BrwlabError):
    """Not enough surviving replicates to form a conditional law."""


class DependencyError(BrwlabError):
    """A pipeline stage is missing an upstream artifact."""


class IntegrityError(BrwlabError):
    """An artifact failed its content-hash check."""
