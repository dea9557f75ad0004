"""Exception types raised across the package."""


class SelfRegError(Exception):
    """Base class for package errors."""


class ConfigError(SelfRegError, ValueError):
    pass


class ShapeError(SelfRegError, ValueError):
    pass


class LabelRangeError(SelfRegError, ValueError):
    pass


class AlignmentError(SelfRegError, ValueError):
    pass


class ChannelParityError(SelfRegError, ValueError):
    pass


class MissingMaskError(SelfRegError, FileNotFoundError):
    def __init__(self, stem):
        super().__init__(f"no mask found for image {stem!r}")
        self.stem = stem


class DecodeError(SelfRegError, IOError):
    pass


class CheckpointError(SelfRegError, IOError):
    pass


class DivergenceError(SelfRegError, RuntimeError):
    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step
        self.value = value
