"""Exception hierarchy shared by the library and the CLI.

Each class carries the process exit code the CLI maps it to.
"""


class MorphError(Exception):
    exit_code = 1


class ValidationError(MorphError, ValueError):
    """Bad user input or configuration. ``errors`` lists every violation found."""

    exit_code = 2

    def __init__(self, message, errors=None):
        self.errors = list(errors) if errors else [message]
        super().__init__(message)


class BackendCapabilityError(MorphError, RuntimeError):
    exit_code = 3


class NumericalError(MorphError, ArithmeticError):
    """Non-finite values or a violated numerical precondition.

    ``step`` is the index of the solver / optimizer iteration that failed, when known.
    """

    exit_code = 4

    def __init__(self, message, step=None):
        self.step = step
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)


class DegeneratePairError(ValidationError):
    pass


class SearchError(NumericalError):
    """The perceptually-uniform bisection could not meet its tolerance."""

    def __init__(self, message, bracket=None):
        self.bracket = bracket
        super().__init__(message)


class PhaseError(MorphError):
    """Wraps a failure with the pipeline phase it happened in."""

    def __init__(self, phase, cause):
        self.phase = phase
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
        super().__init__(f"[{phase}] {cause}")
