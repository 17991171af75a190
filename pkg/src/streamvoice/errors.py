"""Exception types raised across the package."""


class StreamVoiceError(Exception):
    pass


class DimensionError(StreamVoiceError, ValueError):
    pass


class NumericError(StreamVoiceError, ArithmeticError):
    pass


class ConfigError(StreamVoiceError, ValueError):
    pass


class SequenceLengthError(StreamVoiceError, ValueError):
    pass


class DegenerateSequenceError(StreamVoiceError, ValueError):
    pass


class CheckpointVersionError(StreamVoiceError):
    pass
