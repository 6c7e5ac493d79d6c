"""Exception types shared across the pipeline."""


class TristageError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(TristageError):
    """Invalid configuration. Carries the offending field path."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class SolverFailure(TristageError):
    """Linear solver did not produce a valid solution."""


class AssemblyError(TristageError):
    """Stiffness assembly received inconsistent inputs."""


class FitError(TristageError):
    """RBF weight fit or threshold solve did not converge."""


class BandEscapeError(TristageError):
    """The zero contour moved outside the refined integration band."""


class DegenerateDesignError(TristageError):
    """The implicit geometry vanished (no active elements remain)."""
