class DomainError(ValueError):
    """Input outside the domain of an operation."""


class NumericalError(ArithmeticError):
    """Non-finite values produced during a computation.

    ``snapshot`` holds diagnostic state (epoch, step, last parameters) when
    available.
    """

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointVersionError(CheckpointError):
    pass
