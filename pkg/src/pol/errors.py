"""Exception hierarchy shared across the library."""


class PolError(Exception):
    """Base class for all library errors."""


class ShapeError(PolError):
    """A tensor has incompatible dimensions.

    `axis` names the offending axis when one can be singled out.
    """

    def __init__(self, message, axis=None):
        super().__init__(message if axis is None else f"{message} (axis: {axis})")
        self.axis = axis


class DataError(PolError):
    """Bad or missing input data (files, folders, malformed images)."""


class NumericError(PolError):
    """A numerical failure such as NaN gradients or a non-scalar loss."""


class ConfigError(PolError):
    """Invalid or unknown configuration keys/values."""
