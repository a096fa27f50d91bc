"""Exception types raised across the engine."""


class AvaError(Exception):
    """Base class for every error raised by :mod:`ava`."""


class WavFormatError(AvaError, ValueError):
    """Malformed RIFF/WAVE data."""


class UnsupportedFormatError(AvaError, ValueError):
    """Well-formed audio in a layout the engine does not decode (stereo, non-PCM16)."""


class EmptyInputError(AvaError, ValueError):
    pass


class WindowRangeError(AvaError, IndexError):
    pass


class InsufficientDataError(AvaError, ValueError):
    pass


class NumericalError(AvaError, ArithmeticError):
    pass


class ArgumentError(AvaError, ValueError):
    pass


class UndefinedMetricError(AvaError, ValueError):
    pass


class NoDecisionError(AvaError, ValueError):
    pass


class ManifestError(AvaError, ValueError):
    pass


class ModelFormatError(AvaError, ValueError):
    pass
