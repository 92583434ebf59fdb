"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: configuration problems exit with 2,
incompatible inputs (checkpoint/geometry mismatch) with 3, everything else 1.
"""


class TomofocusError(Exception):
    exit_code = 1


class InvalidConfig(TomofocusError, ValueError):
    exit_code = 2


class InvalidSpec(InvalidConfig):
    pass


class InvalidShape(TomofocusError, ValueError):
    pass


class InvalidInput(TomofocusError, ValueError):
    pass


class InvalidBatch(InvalidInput):
    pass


class InvalidPrecision(TomofocusError, ValueError):
    pass


class DegenerateSignal(TomofocusError, ValueError):
    pass


class NumericalDivergence(TomofocusError, ArithmeticError):
    """A non-finite value appeared; ``layer`` and ``step`` locate it."""

    def __init__(self, message, layer=None, step=None):
        super().__init__(message)
        self.layer = layer
        self.step = step


class IncompatibleCheckpoint(TomofocusError):
    exit_code = 3


class ExtentViolation(TomofocusError, ValueError):
    pass


class ContainerError(TomofocusError):
    """Malformed, truncated or corrupted tensor container."""
