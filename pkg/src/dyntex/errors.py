"""Exception types shared across the package.

Every rejected input raises one of these instead of a bare ValueError so
callers (and the CLI) can report which field or dimension was at fault.
"""


class DynTexError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatchError(DynTexError):
    """An array extent does not match what an operation requires.

    ``dimension`` names the offending axis or parameter, e.g. "in_channels"
    or "window".
    """

    def __init__(self, message, dimension=None, expected=None, actual=None):
        self.dimension = dimension
        self.expected = expected
        self.actual = actual
        detail = message
        if dimension is not None:
            detail = f"{message} (dimension: {dimension}"
            if expected is not None:
                detail += f", expected: {expected}, actual: {actual}"
            detail += ")"
        super().__init__(detail)


class ConfigError(DynTexError):
    """A configuration document or parameter set is invalid.

    ``key`` holds the dotted path of the offending entry when known.
    """

    def __init__(self, message, key=None):
        self.key = key
        if key is not None:
            message = f"{key}: {message}"
        super().__init__(message)


class VideoFormatError(DynTexError):
    """A frame file or frame directory cannot be decoded."""


class WeightFileError(DynTexError):
    """A weight file is malformed or inconsistent with a network topology."""


class OptimizerError(DynTexError):
    """The optimizer could not proceed."""


class NonFiniteObjectiveError(OptimizerError):
    """The objective returned a non-finite value or gradient.

    Carries the iteration index at which it happened plus the best point
    seen so far, so callers can salvage a partial result.
    """

    def __init__(self, iteration, best_x=None, best_loss=None, trace=None):
        self.iteration = iteration
        self.best_x = best_x
        self.best_loss = best_loss
        self.trace = trace
        super().__init__(
            f"objective returned a non-finite value or gradient at iteration {iteration}"
        )
