"""Exception hierarchy.

Every error carries the process exit code the command-line front end should
use when it escapes: 1 for usage problems, 2 for bad data, 3 for numerical
failures.
"""


class HyperclustError(Exception):
    exit_code = 3


class UsageError(HyperclustError, ValueError):
    exit_code = 1


class ValidationError(HyperclustError, ValueError):
    """Input data violates a structural requirement (e.g. an all-missing row)."""

    exit_code = 2


class ParseError(ValidationError):
    pass


class DomainError(HyperclustError, ValueError):
    """Argument outside the mathematical domain of a function."""

    exit_code = 3


class DecompositionError(HyperclustError, ArithmeticError):
    """A dispersion matrix could not be Cholesky factorised."""


class DegenerateComponentError(HyperclustError, ArithmeticError):
    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component


class GenerationError(HyperclustError):
    """Synthetic missingness could not be injected under the constraints."""

    exit_code = 2


class FitError(HyperclustError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = list(diagnostics or [])


class SearchError(FitError):
    pass
