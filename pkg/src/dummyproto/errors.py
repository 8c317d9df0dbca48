"""Exception types shared across the package.

The CLI maps these to exit codes: UsageError -> 1, DataError -> 2,
NumericsError -> 3.
"""


class UsageError(Exception):
    """Bad invocation: unknown config key, invalid flag combination."""


class DataError(Exception):
    """Broken input data: missing files, malformed WAV, infeasible episode."""


class NumericsError(Exception):
    """Numerical failure: non-finite values, diverging training."""


class ShapeError(NumericsError):
    """Operands not conformable for a kernel."""


class GraphError(NumericsError):
    """Autodiff tape misuse: non-scalar loss, consumed or detached tape."""
