class CvipError(Exception):
    """Base class for all errors raised by this package."""


class InputError(CvipError, ValueError):
    """Arguments violate a precondition (shapes, ranges, empty inputs)."""


class DecodeError(CvipError):
    """A binary container is truncated or internally inconsistent."""


class SolverError(CvipError):
    """The optical-flow solver produced non-finite values."""


class GraphError(CvipError):
    """Invalid use of the autodiff tape."""


class BuildError(CvipError):
    """A network specification cannot be built."""


class TrainingError(CvipError):
    """A training stage failed (missing prerequisite, divergence)."""

    def __init__(self, message, stage=None):
        super().__init__(message if stage is None else f"[{stage}] {message}")
        self.stage = stage


class BenchError(CvipError):
    """Timing measurements are unusable."""
