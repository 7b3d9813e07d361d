"""Exception hierarchy shared by the library and the command line."""


class MixarError(Exception):
    """Base class for every error raised by mixar."""


class DimensionError(MixarError, ValueError):
    """An array or window has the wrong length for the model at hand."""


class InvariantError(MixarError, ValueError):
    """A parameter object violates one of its structural invariants."""


class InsufficientDataError(MixarError, ValueError):
    """The series is too short for the requested number of lags/components."""


class DivergenceError(MixarError, ArithmeticError):
    """A simulated trajectory produced non-finite values."""

    def __init__(self, index, message=None):
        self.index = index
        super().__init__(message or f"non-finite value at index {index}")


class NumericalError(MixarError, ArithmeticError):
    """Every restart of a fit failed numerically."""


class IngestionError(MixarError, ValueError):
    """A data file could not be read or parsed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(MixarError, ValueError):
    """A model file does not follow the expected JSON schema."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")
