class CellMapError(Exception):
    """Base class for all errors raised by this package."""


class AngleNearPi(CellMapError):
    pass


class InvalidCount(CellMapError):
    pass


class ZeroVector(CellMapError):
    pass


class EmptyMap(CellMapError):
    pass


class LatticeMismatch(CellMapError):
    pass


class InsufficientCorrespondences(CellMapError):
    pass


class SingularNormalEquations(CellMapError):
    pass


class DisconnectedGraph(CellMapError):
    pass


class SingularSystem(CellMapError):
    pass


class IndexMismatch(CellMapError):
    pass


class FormatError(CellMapError):
    pass


class MissingPose(CellMapError):
    pass


class EmptyDataset(CellMapError):
    pass


class DegenerateTrajectory(CellMapError):
    pass


class TrajectoryTooShort(CellMapError):
    pass


class IoError(CellMapError):
    pass
