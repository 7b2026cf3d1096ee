"""Exception types raised by robustq."""


class RobustQError(Exception):
    """Base class for every error raised by the library."""


class DimensionError(RobustQError, ValueError):
    """Tensor shapes or channel counts do not agree."""


class ContractError(RobustQError, ValueError):
    """A documented precondition of an operation was violated."""


class NonFiniteError(RobustQError, FloatingPointError):
    """A loss or gradient contained NaN or Inf."""


class AttackError(NonFiniteError):
    """An attack produced a non-finite input gradient."""


class FormatError(RobustQError, ValueError):
    """A file (IDX, checkpoint, config) could not be parsed."""


class CheckpointVersionError(FormatError):
    """The checkpoint was written by an unsupported format version."""


class PruningError(RobustQError):
    """The network structure does not allow the requested pruning."""
