"""Exception hierarchy shared by all simulator components."""


class VistopError(Exception):
    """Base class for every error raised by this package."""


class BoundsError(VistopError):
    """A coordinate or address fell outside its valid range."""


class QuantError(VistopError):
    """Invalid numeric input to a quantization operation (e.g. NaN)."""


class ParamError(VistopError):
    """An operation was invoked with parameters violating its contract."""


class StreamError(VistopError):
    """Parameter-stream layout or consumption went out of step."""


class ProgramError(VistopError):
    """A compiled program is malformed or failed during execution."""


class DecodeError(VistopError):
    """Program file could not be decoded.

    Carries the byte offset at which decoding failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class LoweringError(VistopError):
    """Model configuration or weight manifest cannot be lowered."""


class GeometryError(LoweringError):
    """Feature-map geometry is incompatible (divisibility etc.)."""


class CalibrationError(VistopError):
    """Timing calibration against measured rows is impossible."""
