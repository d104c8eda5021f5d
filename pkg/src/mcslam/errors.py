"""Exception types shared across the package."""


class SlamError(Exception):
    """Base class for recoverable pipeline errors."""


class DegeneratePoint(SlamError):
    pass


class OutsideBoundary(SlamError):
    pass


class BehindCamera(SlamError):
    pass


class CalibrationError(SlamError):
    pass


class DegenerateConfiguration(SlamError):
    pass


class AmbiguousDecomposition(SlamError):
    pass


class InsufficientParallax(SlamError):
    pass


class CollinearPoints(SlamError):
    pass


class NoRealSolution(SlamError):
    pass


class ZeroSpread(SlamError):
    pass


class NoModelFound(SlamError):
    pass


class NotConverged(SlamError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class TooFewEdges(SlamError):
    pass


class ProjectionInvalid(SlamError):
    pass


class EmptyWindow(SlamError):
    pass


class DisconnectedGraph(SlamError):
    pass


class NoObservations(SlamError):
    pass


class EmptyVocabulary(SlamError):
    pass


class DuplicateId(SlamError):
    pass


class TooFewInliers(SlamError):
    pass


class RansacFailed(SlamError):
    pass


class NoPairs(SlamError):
    pass


class TrajectoryTooShort(SlamError):
    pass


class InitializationFailed(SlamError):
    pass


class FormatError(SlamError):
    """Malformed input file."""
