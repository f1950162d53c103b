"""Exception types raised across the package."""


class FlowKLError(Exception):
    """Base class for all package errors."""


class DomainError(FlowKLError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ArgumentError(FlowKLError, ValueError):
    """Malformed or inconsistent arguments (shapes, widths, lengths)."""


class NumericError(FlowKLError, ArithmeticError):
    """A computation produced non-finite values."""

    def __init__(self, message, *, step=None, index=None):
        super().__init__(message)
        self.step = step
        self.index = index


class FormatError(FlowKLError, ValueError):
    """A serialized payload is corrupt or has an unsupported version."""


class TrainingError(FlowKLError, RuntimeError):
    """Training diverged or failed to meet its own postcondition."""

    def __init__(self, message, *, step=None):
        super().__init__(message)
        self.step = step


class VerificationError(FlowKLError, AssertionError):
    """A verification report found a violated identity or inequality."""

    def __init__(self, message, *, quantity=None):
        super().__init__(message)
        self.quantity = quantity
