"""Exception hierarchy shared by every module."""


class GazeRegError(Exception):
    pass


class DimensionError(GazeRegError, ValueError):
    """Operand shapes are incompatible."""


class GeometryError(GazeRegError, ValueError):
    """A patch grid or overlay does not tile the frame it is applied to."""


class DomainError(GazeRegError, ValueError):
    """A scalar argument is outside its admissible range."""


class ZeroMassError(GazeRegError, ValueError):
    """A distribution with zero total mass cannot be normalized."""


class NumericError(GazeRegError, ArithmeticError):
    """A computation produced a non-finite value."""


class BoundsError(GazeRegError, ValueError):
    """A gaze sample lies outside the frame."""


class FormatError(GazeRegError, ValueError):
    """A binary or text file does not follow its declared layout."""


class LengthError(FormatError):
    """A binary payload is shorter or longer than its header announces."""


class PlacementError(GazeRegError, RuntimeError):
    """Scene objects could not be placed without overlap."""


class DivergenceError(GazeRegError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, message, last_finite_epoch=None):
        super().__init__(message)
        self.last_finite_epoch = last_finite_epoch
