class EmbpError(Exception):
    """Base class for errors raised by this package."""


class InvalidParameter(EmbpError, ValueError):
    pass


class NumericalFailure(EmbpError, FloatingPointError):
    """Non-finite values appeared during an iterative computation."""

    def __init__(self, message: str, iteration: int | None = None, blocks=None):
        super().__init__(message if iteration is None else f"{message} (iteration {iteration})")
        self.iteration = iteration
        self.blocks = blocks


class StateSpaceTooLarge(EmbpError, ValueError):
    pass


class IdentifiabilityError(EmbpError, ValueError):
    """Pilot layout does not determine the channel taps."""


class DegeneratePosterior(EmbpError, ZeroDivisionError):
    pass


class TrainingDiverged(EmbpError, RuntimeError):
    pass
