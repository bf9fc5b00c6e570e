"""Exception types raised by the constructors and verifiers."""


class ReluForgeError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(ReluForgeError, ValueError):
    pass


class DuplicatePoints(ReluForgeError, ValueError):
    def __init__(self, message, pairs=()):
        super().__init__(message)
        self.pairs = list(pairs)


class NoDirectionFound(ReluForgeError, RuntimeError):
    pass


class DegenerateConfiguration(ReluForgeError, RuntimeError):
    pass


class DomainError(ReluForgeError, ValueError):
    pass


class NotAMemorizer(ReluForgeError, ValueError):
    pass


class NonFiniteLoss(ReluForgeError, FloatingPointError):
    pass


class LossLabelMismatch(ReluForgeError, ValueError):
    pass


class PlacementError(ReluForgeError, RuntimeError):
    pass


class TooFine(ReluForgeError, ValueError):
    pass
