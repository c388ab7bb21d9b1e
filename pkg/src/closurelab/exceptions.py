"""Exception types shared across the package."""


class ClosureLabError(Exception):
    """Base class for all package errors."""


class NonFiniteStateError(ClosureLabError):
    """A simulated state picked up an inf or NaN component."""


class NonFiniteLossError(ClosureLabError):
    """A training loss evaluated to inf or NaN.

    Carries the loss history accumulated before the failure so partial
    runs remain inspectable.
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []


class DimMismatchError(ClosureLabError):
    """Input shape does not match a network or operator signature."""


class StencilTooWideError(ClosureLabError):
    """Trajectory is shorter than the filter stencil."""


class OddStrideError(ClosureLabError):
    """Box filter stencils need an even sample stride."""


class GammaSingularError(ClosureLabError):
    """Probability-path quantities are singular at gamma >= 1."""


class EmptyInputError(ClosureLabError):
    """Metric computation received an empty sample set."""


class ConfigError(ClosureLabError):
    """A run configuration failed to parse or validate."""


class MissingInputError(ClosureLabError):
    """A pipeline stage referenced an input file that does not exist."""
