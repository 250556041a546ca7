class DelayScanError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(DelayScanError, ValueError):
    pass


class ConfigError(DelayScanError, ValueError):
    pass


class ScheduleError(DelayScanError, ValueError):
    pass


class StepIndexError(DelayScanError, IndexError):
    pass


class PhantomSpecError(DelayScanError, ValueError):
    pass


class SampleSizeError(DelayScanError, ValueError):
    pass


class NumericError(DelayScanError, ArithmeticError):
    pass


class GradCheckError(NumericError):
    """The checked function produced a non-finite value."""

    def __init__(self, message, coordinate=None):
        super().__init__(message)
        self.coordinate = coordinate


class DivergenceError(NumericError):
    """Non-finite values appeared during a forward pass, sampling or training."""

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class TrainingError(DelayScanError, RuntimeError):
    pass
