"""Exception types shared across the solver stack."""


class PMCError(Exception):
    """Base class for all package-specific errors."""


# geometry
class StencilOutOfDomain(PMCError):
    """A finite-difference stencil left the region where data is defined."""


class NonpositiveWarp(PMCError):
    """Warp function evaluated to a non-positive value."""


class CollarTooThin(PMCError):
    """Boundary-distance stencil exits the collar where d(x) is valid."""


class UnsupportedMetricKind(PMCError):
    """Operation not available for this metric kind (e.g. grid_sampled Ricci)."""


# problems / domains
class NoBoundary(PMCError):
    """Boundary accessor called on a closed (boundaryless) domain."""


# discretization
class DivergedField(PMCError):
    """Field contains non-finite values."""


class NotRadial(PMCError):
    """Problem data is not rotationally symmetric."""


# solver
class NewtonStall(PMCError):
    """Armijo backtracking found no descent direction."""


class SingularJacobian(PMCError):
    """Sparse factorization of the Jacobian failed."""


class NewtonFailure(PMCError):
    """Continuation could not complete its schedule."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class InsufficientHistory(PMCError):
    """Blow-up classification needs at least two recorded t levels."""


class NotSolutions(PMCError):
    """Comparison check called on fields that do not solve the problem."""


class CollarEmpty(PMCError):
    """Barrier collar contains no grid nodes."""


class BallOutsideDomain(PMCError):
    """Monitoring ball is not contained in the domain."""


class ZeroBeta(PMCError):
    """A-priori bound requested but the monotonicity constant is zero."""


# oracles
class NotASolution(PMCError):
    """Field does not satisfy the PMC equation at solver tolerance."""


class HypothesisFailed(PMCError):
    """Barrier construction hypothesis (boundary inequality) violated."""


# cli
class ConfigError(PMCError):
    """Malformed or inconsistent run configuration."""
