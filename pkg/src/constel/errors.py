"""Exception hierarchy shared across the package."""


class ConstelError(Exception):
    """Base class for all errors raised by constel."""


class DegenerateError(ConstelError, ValueError):
    """Geometry is too close to collinear/coincident to define a frame or fit."""


class NoConsensusError(ConstelError):
    """RANSAC could not find a consensus set of the required size."""


class InsufficientPointsError(ConstelError, ValueError):
    """A cloud has fewer points than an operation requires."""


class DimensionMismatchError(ConstelError, ValueError):
    """Descriptors of different lengths were compared."""


class InsufficientMatchesError(ConstelError):
    """Too few correspondences survived to estimate a pose."""


class InfeasibleSpecError(ConstelError, ValueError):
    """A synthetic scene specification cannot be realised."""


class MapFormatError(ConstelError):
    """Base class for map file problems."""


class MalformedMapError(MapFormatError, ValueError):
    pass


class VersionMismatchError(MapFormatError):
    pass


class ChecksumError(MapFormatError):
    pass
