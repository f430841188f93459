"""Exception types raised by the library."""


class HHOFlowError(Exception):
    """Base class for all library-specific errors."""


class ParseError(HHOFlowError):
    """Malformed mesh or config file."""


class TopologyError(HHOFlowError):
    """Non-manifold connectivity (e.g. a face shared by more than two elements)."""


class StarShapeError(HHOFlowError):
    """An element is not star-shaped with respect to its star center."""


class QuadratureDeficit(HHOFlowError):
    """A declared polynomial integrand exceeds the available quadrature exactness."""


class UnsupportedDegree(HHOFlowError):
    """Requested quadrature exactness beyond the constructed range."""


class SingularGram(HHOFlowError):
    """Gram matrix of a polynomial basis is numerically singular."""


class SaddleSingular(HHOFlowError):
    """Local mixed (saddle) system unexpectedly rank-deficient."""


class ContractionFailure(HHOFlowError):
    """Composite projector norm is not a contraction; basis or projector bug."""


class NotInteriorFace(HHOFlowError):
    """Jump requested across a simplicial face with a single adjacent simplex."""


class TransportNotDivergenceFree(HHOFlowError):
    """Convection transport field violates the discrete divergence-free precondition."""


class ExtrapolantNotDivFree(TransportNotDivergenceFree):
    """BDF2 extrapolated transport violates the discrete divergence-free invariant."""


class LinearSolveFailure(HHOFlowError):
    """Global linear solve failed or left a residual above tolerance."""


class InsufficientHistory(HHOFlowError):
    """Time-integrated norm requested with fewer than two completed steps."""


class ConfigError(HHOFlowError):
    """Invalid study configuration."""
