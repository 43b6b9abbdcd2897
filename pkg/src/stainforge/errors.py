"""Exception hierarchy shared across the package."""


class StainforgeError(Exception):
    """Base class for all package errors."""


class ValidationError(StainforgeError, ValueError):
    """Invalid configuration or input; the CLI maps it to exit code 2."""


class NotEnoughTissue(StainforgeError):
    pass


class DegenerateStain(StainforgeError):
    pass


class EmptyTissue(StainforgeError):
    pass


class ShapeMismatch(StainforgeError, ValueError):
    pass


class NonFiniteValue(StainforgeError, FloatingPointError):
    pass


class NonFiniteGradient(NonFiniteValue):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class EmptyDataset(StainforgeError):
    pass


class SingleDomain(StainforgeError):
    pass


class ImageTooSmall(StainforgeError, ValueError):
    pass


class InsufficientCenters(ValidationError):
    pass


class UndefinedKappa(StainforgeError, ZeroDivisionError):
    pass


class SampleTooSmall(ValidationError):
    pass


class DegenerateData(StainforgeError):
    pass


class InsufficientSamples(ValidationError):
    pass
