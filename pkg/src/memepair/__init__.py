"""Single-stream multimodal transformer with a paired caption head, from scratch on numpy."""

from ._kernels import BACKEND
from .errors import (CheckpointError, GraphError, InputError, InvariantError, MemePairError,
                     NonFiniteError, ShapeError)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "CheckpointError",
    "GraphError",
    "InputError",
    "InvariantError",
    "MemePairError",
    "NonFiniteError",
    "ShapeError",
    "__version__",
]
