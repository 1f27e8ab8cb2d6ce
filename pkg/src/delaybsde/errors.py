"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes, so each class carries one.
"""


class DelayBsdeError(Exception):
    exit_code = 1


class ConfigurationError(DelayBsdeError, ValueError):
    """Inconsistent inputs: misaligned grids, empty atom lists, bad presets."""

    exit_code = 2


class DomainError(DelayBsdeError, ValueError):
    """An argument lies outside the domain of the operation."""

    exit_code = 2


class NumericError(DelayBsdeError, ArithmeticError):
    """A NaN or infinity showed up where a finite value was required."""

    exit_code = 3

    def __init__(self, message, **context):
        super().__init__(message)
        self.context = context


class UnsupportedInputError(DelayBsdeError, ValueError):
    exit_code = 2


class NonConvergenceError(DelayBsdeError, RuntimeError):
    """Picard iteration hit ``max_iter`` before the sup-gap dropped below ``tol``."""

    exit_code = 4

    def __init__(self, message, history):
        super().__init__(message)
        self.history = list(history)
