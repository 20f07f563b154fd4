"""Exception types shared across the package."""


class MonoviError(Exception):
    """Base class for all package errors."""


class NonPositiveDepth(MonoviError, ValueError):
    pass


class NonPositiveInverseDepth(MonoviError, ValueError):
    pass


class EmptySegment(MonoviError, ValueError):
    pass


class NonMonotonicTimestamps(MonoviError, ValueError):
    pass


class OutOfBounds(MonoviError, IndexError):
    pass


class NumericalFailure(MonoviError, ArithmeticError):
    pass


class RankDeficient(MonoviError, ArithmeticError):
    pass


class DegenerateSystem(MonoviError):
    """Closed-form system is too ill-conditioned to trust its depths."""


class InsufficientData(MonoviError, ValueError):
    pass


class DegenerateGeometry(MonoviError, ValueError):
    pass


class InvalidScenario(MonoviError, ValueError):
    pass


class DatasetError(MonoviError):
    """I/O or layout problem with an on-disk dataset."""


class MissingDepthMap(DatasetError):
    pass


class CalibrationParseError(DatasetError):
    pass


class WindowOutOfRange(DatasetError):
    pass


class InitializationFailed(MonoviError):
    """Raised by the pipeline; ``stage`` names where it gave up."""

    def __init__(self, stage, message, report=None):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.report = report


class PointBehindCamera(NonPositiveDepth):
    pass
