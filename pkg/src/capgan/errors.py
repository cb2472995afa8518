"""Exception hierarchy shared across the package.

The CLI maps each subclass to its own exit code, so callers can tell a
malformed input file from a diverged training run without parsing text.
"""


class CapganError(Exception):
    exit_code = 1


class FormatError(CapganError, ValueError):
    """A file does not follow the binary layout it claims to."""

    exit_code = 3


class ConsistencyError(CapganError, ValueError):
    """Two inputs that must agree (e.g. image and label counts) disagree."""

    exit_code = 3


class ShapeError(CapganError, ValueError):
    exit_code = 4


class ConfigError(CapganError, ValueError):
    exit_code = 2


class TransferError(CapganError):
    exit_code = 5


class NumericError(CapganError, ArithmeticError):
    exit_code = 6


class TrainingError(CapganError, RuntimeError):
    """Raised when a loss or gradient stops being finite.

    ``state`` carries whatever the trainer could preserve (the last finite
    parameters), so the caller can inspect or checkpoint it.
    """

    exit_code = 7

    def __init__(self, message, *, step=None, epoch=None, member=None, state=None):
        super().__init__(message)
        self.step = step
        self.epoch = epoch
        self.member = member
        self.state = state


class EvaluationError(CapganError):
    exit_code = 8


class StageError(CapganError):
    exit_code = 9
