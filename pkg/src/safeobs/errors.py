"""Exception hierarchy shared by all modules."""


class SafeObsError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(SafeObsError, ValueError):
    """Malformed, non-finite or dimensionally inconsistent input."""


class NotPositiveDefiniteError(SafeObsError, ValueError):
    """Cholesky factorization met a non-positive pivot.

    Attributes
    ----------
    pivot : int
        Zero-based index of the leading minor that failed.
    """

    def __init__(self, pivot, message=None):
        self.pivot = int(pivot)
        super().__init__(message or f"matrix is not positive definite (pivot {self.pivot})")


class PreconditionError(SafeObsError, ValueError):
    """A documented precondition of an operation does not hold."""


class NoDesignError(SafeObsError):
    """No certified observer design exists on the requested range."""


class UnsupportedError(SafeObsError):
    """Operation not available for this object (e.g. non-differentiable basis)."""


class DivergenceError(SafeObsError):
    """Simulated state left the configured explosion guard.

    Attributes
    ----------
    step : int
        Time index at which the guard tripped.
    which : str
        ``"plant"`` or ``"observer"``.
    """

    def __init__(self, step, which, norm):
        self.step = int(step)
        self.which = which
        self.norm = float(norm)
        super().__init__(f"{which} state norm {self.norm:.3g} exceeded guard at step {self.step}")


class SafetyViolationError(SafeObsError):
    """Learning aborted because a batch simulation diverged."""

    def __init__(self, iteration, coefficients, cause):
        self.iteration = int(iteration)
        self.coefficients = list(map(float, coefficients))
        self.cause = cause
        super().__init__(f"batch simulation diverged at learning iteration {iteration}: {cause}")


class IllConditionedGramError(SafeObsError):
    """GP Gram matrix could not be factorized even after jitter escalation."""


class LearningAbortedError(SafeObsError):
    """Learning loop stopped on a non-divergence failure (e.g. GP fit)."""


class ConfigError(SafeObsError, ValueError):
    """Pipeline configuration failed validation.

    Attributes
    ----------
    errors : list of dict
        Structured description of each problem (``loc``, ``msg``).
    """

    def __init__(self, errors):
        self.errors = list(errors)
        lines = "; ".join(f"{'.'.join(map(str, e.get('loc', ())))}: {e.get('msg')}" for e in self.errors)
        super().__init__(f"invalid configuration: {lines}")
