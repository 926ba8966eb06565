"""Exception hierarchy shared by every module."""


class StochPSRError(Exception):
    """Base class for all errors raised by this package."""


class DegenerateInput(StochPSRError):
    pass


class InvalidConfig(StochPSRError, ValueError):
    pass


class ShapeError(StochPSRError, ValueError):
    pass


class NumericalError(StochPSRError, ArithmeticError):
    pass


class TrainingDiverged(StochPSRError):
    """Raised when a loss becomes non-finite.

    ``last_good`` holds the parameters (as a state dict per network) from the
    last step whose loss was finite, so callers can resume or inspect them.
    """

    def __init__(self, message, last_good=None, epoch=None):
        super().__init__(message)
        self.last_good = last_good
        self.epoch = epoch


class EmptyResult(StochPSRError):
    pass


class EmptyScan(StochPSRError):
    pass


class CheckpointError(StochPSRError):
    pass
