"""Exception hierarchy shared by every ctcaps module."""


class CtCapsError(Exception):
    """Base class for all errors raised by ctcaps."""


class DimensionError(CtCapsError, ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class UsageError(CtCapsError, ValueError):
    """An operation was called with arguments outside its domain."""


class StateError(CtCapsError, RuntimeError):
    """An object is not in a state that allows the requested operation."""


class NonFiniteError(CtCapsError, FloatingPointError):
    """A NaN or Inf was produced where only finite values are allowed."""


class OptimizerError(CtCapsError, RuntimeError):
    """The optimizer refused to take a step."""


class FormatError(CtCapsError, ValueError):
    """A file on disk is malformed, truncated or of the wrong version."""


class DataError(CtCapsError, ValueError):
    """Input data is missing or inconsistent."""


class EmptyVolumeError(DataError):
    """A volume has no slices left."""


class StratificationError(DataError):
    """A cohort cannot be split with class stratification."""


class ConfigError(CtCapsError, ValueError):
    """A run configuration failed validation."""
