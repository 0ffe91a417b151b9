"""Exception types raised across the package."""


class SelfTrainError(Exception):
    """Base class for all package errors."""


class NonFiniteInput(SelfTrainError, ValueError):
    pass


class NotADistribution(SelfTrainError, ValueError):
    pass


class ShapeMismatch(SelfTrainError, ValueError):
    pass


class InvalidTemperature(SelfTrainError, ValueError):
    pass


class EmptyBatch(SelfTrainError, ValueError):
    pass


class EmptyEvaluation(SelfTrainError, ValueError):
    pass


class DivergedLoss(SelfTrainError, FloatingPointError):
    pass


class CorruptDataset(SelfTrainError, IOError):
    pass


class IncompleteDataset(SelfTrainError, IOError):
    pass


class CorruptCheckpoint(SelfTrainError, IOError):
    pass


class IncompatibleCheckpoint(SelfTrainError, ValueError):
    pass


class BadPathString(SelfTrainError, ValueError):
    pass


class FilterTooStrict(SelfTrainError, RuntimeError):
    pass


class SearchSpaceTooLarge(SelfTrainError, ValueError):
    pass
