"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateVectorError(ValueError):
    """A vector that must be normalized has (near) zero length."""


class ConfigurationError(ValueError):
    """Block counts, ranks or other structural settings are invalid."""


class ContractError(RuntimeError):
    """An API precondition that is not about shapes was violated."""


class NumericalError(ArithmeticError):
    """A linear solve or similar numerical routine failed."""


class SetupError(RuntimeError):
    """Pretraining of the toy model did not reach its target loss."""


class CheckpointFormatError(ValueError):
    """A checkpoint file is malformed. Carries the byte offset of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
