"""Exception hierarchy.

Every domain error carries a ``category`` string (the class name) so the
command line front end can print a one-line, machine-parsable failure.
"""


class TumorSegError(Exception):
    """Base class for all domain errors raised by this package."""

    @property
    def category(self) -> str:
        return type(self).__name__


class MalformedHeader(TumorSegError):
    pass


class DimensionMismatch(TumorSegError):
    pass


class NonFiniteData(TumorSegError):
    pass


class IoError(TumorSegError, OSError):
    pass


class EmptyBrain(TumorSegError):
    pass


class ZeroVariance(TumorSegError):
    pass


class ScheduleExhausted(TumorSegError):
    pass


class DegenerateHistogram(TumorSegError):
    pass


class EmptyScribbles(TumorSegError):
    pass


class TooFewLabels(TumorSegError):
    pass


class NonSubmodular(TumorSegError):
    pass


class ShapeMismatch(TumorSegError):
    pass


class OddSpatialDims(TumorSegError):
    pass


class InvalidConfig(TumorSegError):
    pass


class EpochOutOfRange(TumorSegError):
    pass


class DivergedLoss(TumorSegError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


class GeometryOverflow(TumorSegError):
    pass


class MissingCheckpoint(TumorSegError):
    pass


class MissingRows(TumorSegError):
    pass
