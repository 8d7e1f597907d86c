"""Exception types shared across the package."""


class XmodalError(Exception):
    """Base class for every error this package raises deliberately."""


class DimensionError(XmodalError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(XmodalError, ValueError):
    """A configuration value is out of its documented range."""


class NumericsError(XmodalError, ArithmeticError):
    """An operation produced NaN or Inf."""


class TapeError(XmodalError, RuntimeError):
    """Tape misuse, e.g. backward on a spent tape."""


class GenerationError(XmodalError, RuntimeError):
    """A clip cannot be generated under the requested geometry."""


class SamplingError(XmodalError, RuntimeError):
    """The dataset cannot satisfy a sampling request."""


class ProtocolError(XmodalError, RuntimeError):
    """An evaluation protocol precondition does not hold."""


class FormatError(XmodalError, ValueError):
    """A serialized artifact is malformed. Names the offending field."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class TrainingDiverged(XmodalError, RuntimeError):
    """Training hit a non-finite loss and aborted."""

    def __init__(self, iteration: int, last_record=None):
        msg = f"non-finite loss at iteration {iteration}"
        super().__init__(msg)
        self.iteration = iteration
        self.last_record = last_record
