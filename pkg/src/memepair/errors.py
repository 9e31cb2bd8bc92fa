"""Exception hierarchy shared by every module."""


class MemePairError(Exception):
    """Base class for all package errors."""


class InputError(MemePairError, ValueError):
    """Bad user-facing input: malformed file, invalid config, precondition failure."""


class ShapeError(InputError):
    """Tensor extents do not line up."""


class NonFiniteError(MemePairError, ArithmeticError):
    """A forward value, loss or gradient became NaN or infinite."""


class GraphError(MemePairError, RuntimeError):
    """Misuse of a computation graph (non-scalar loss, second backward)."""


class CheckpointError(InputError):
    """Checkpoint file is corrupt or has an unsupported version."""


class InvariantError(MemePairError, AssertionError):
    """An internal invariant was violated."""
