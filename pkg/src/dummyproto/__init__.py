"""Few-shot open-set keyword spotting with generated dummy prototypes.

Pure numpy implementation (numba-accelerated hot kernels) of episodic
prototype learning with an episode-adaptive dummy class for open-set
rejection, plus the audio frontend, data protocol, training loop, and
evaluation suite.
"""

from .errors import DataError, GraphError, NumericsError, ShapeError, UsageError
from .tensor import Tensor, arena_scope, backward, no_grad

__all__ = [
    "DataError",
    "GraphError",
    "NumericsError",
    "ShapeError",
    "UsageError",
    "Tensor",
    "arena_scope",
    "backward",
    "no_grad",
]

__version__ = "0.1.0"
