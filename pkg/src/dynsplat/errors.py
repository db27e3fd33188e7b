"""Exception types raised across the package."""


class DynSplatError(Exception):
    """Base class for all package errors."""


class ValidationError(DynSplatError, ValueError):
    """Invalid user input or configuration (CLI exit code 2)."""


class NearAngularSingularity(DynSplatError, ValueError):
    pass


class EmptyBlend(DynSplatError, ValueError):
    pass


class EmptyScaffold(DynSplatError, ValueError):
    pass


class NoTracks(DynSplatError, ValueError):
    pass


class MissingForwardCache(DynSplatError, RuntimeError):
    pass


class ShapeMismatch(DynSplatError, ValueError):
    pass


class EmptyCandidate(DynSplatError, ValueError):
    pass


class EmptyMask(DynSplatError, ValueError):
    pass


class BehindCamera(DynSplatError, ValueError):
    pass


class SingularSystem(DynSplatError, RuntimeError):
    pass


class InvalidSpec(ValidationError):
    pass


class MissingAssociation(DynSplatError, ValueError):
    pass


class MalformedTrajectory(DynSplatError, ValueError):
    pass


class InsufficientPoses(DynSplatError, ValueError):
    pass
