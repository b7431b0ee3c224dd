"""Exception types shared across the package.

All of them derive from ``ValueError`` so callers that only care about bad
input can catch one thing; the CLI maps ``ConfigError`` to exit code 2.
"""


class DNPMError(Exception):
    pass


class ShapeError(DNPMError, ValueError):
    """Array dimensions do not agree."""


class ConfigError(DNPMError, ValueError):
    """A configuration value is invalid or inconsistent."""


class RangeError(DNPMError, ValueError):
    """A coordinate or parameter lies outside its admissible domain."""


class EmptyInputError(DNPMError, ValueError):
    pass


class PreconditionError(DNPMError, ValueError):
    pass


class ChartError(DNPMError, ValueError):
    """UV triangles overlap, so the chart is not injective."""


class TrainingDivergedError(DNPMError, RuntimeError):
    """Raised when a loss turns non-finite; carries the diagnostic checkpoint path."""

    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
