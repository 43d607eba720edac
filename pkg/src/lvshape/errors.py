"""Exception types raised across the package."""


class LVShapeError(Exception):
    """Base class for all package errors."""


class ParameterError(LVShapeError, ValueError):
    """Invalid configuration or argument value."""


class InputError(LVShapeError, ValueError):
    """Inconsistent or insufficient input data."""


class FormatError(LVShapeError, ValueError):
    """Malformed file. ``record`` is the offending line or record index when known."""

    def __init__(self, message, record=None):
        if record is not None:
            message = f"{message} (record {record})"
        super().__init__(message)
        self.record = record


class GeometryError(LVShapeError):
    """Degenerate or invalid geometry (zero-area faces, open surfaces, collinear clouds)."""


class EmptyTargetError(LVShapeError):
    """A point set that must be nonempty is empty."""


class NumericalError(LVShapeError, ArithmeticError):
    """Non-finite loss or gradient during optimization."""

    def __init__(self, message, index=None):
        if index is not None:
            message = f"{message} (index {index})"
        super().__init__(message)
        self.index = index
