"""Exception hierarchy shared by every module."""


class CtxGenError(Exception):
    """Base class for all library errors."""


class DataError(CtxGenError):
    """Bad input data: unreadable files, unknown context values, too few examples."""


class NumericError(CtxGenError):
    """A NaN or Inf showed up where finite values are required."""


class CheckpointError(CtxGenError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class FingerprintMismatchError(CheckpointError):
    """Vocabulary on disk does not match the one the model was trained with."""


class CorruptCheckpointError(CheckpointError):
    pass
