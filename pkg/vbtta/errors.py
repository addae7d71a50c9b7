class VbttaError(Exception):
    """Base class for every error raised by the vbtta package"""


class DomainError(VbttaError, ValueError):
    """Argument outside the domain of the operation"""


class ConfigurationError(VbttaError):
    """Invalid experiment configuration or missing collaborator"""


class DegenerateInputError(VbttaError):
    """Input carries no spread or no mass (singular covariance, zero totals)"""


class NumericalError(VbttaError):
    """A quantity that must be finite is not"""

    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


class EvaluationError(VbttaError):
    """An integrand or objective returned NaN"""


class ConvergenceError(VbttaError):
    """An iterative routine stopped before reaching its tolerance"""


class DivergenceError(VbttaError):
    """An optimization ran away; the trace up to the failure is attached"""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []


class StageError(VbttaError):
    """Failure inside one named stage of an experiment run"""

    def __init__(self, stage, cause):
        # pickling rebuilds the error from args
        super().__init__(stage, cause)
        self.stage = stage
        self.cause = cause

    def __str__(self):
        return f"stage '{self.stage}' failed: {self.cause}"
