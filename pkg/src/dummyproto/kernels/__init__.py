"""Hot numeric kernels with two interchangeable backends.

The jit backend compiles the inner loops with numba; the reference backend
is pure numpy. Both expose the same functions writing into caller-provided
output arrays. Selection: the DUMMYPROTO_BACKEND environment variable
("numba" or "numpy"), defaulting to numba when it is importable.
"""

import os

from . import reference

_BACKENDS = {"numpy": reference}
_active_name = None
_active = None


def _load_numba_backend():
    from . import jit

    return jit


def available_backends():
    names = ["numpy"]
    try:
        _load_numba_backend()
        names.insert(0, "numba")
    except ImportError:
        pass
    return names


def set_backend(name):
    """Select the kernel backend at runtime. Returns the backend module."""
    global _active, _active_name
    if name == "numpy":
        _active = reference
    elif name == "numba":
        _active = _load_numba_backend()
    else:
        raise ValueError(f"unknown kernel backend {name!r} (use 'numba' or 'numpy')")
    _active_name = name
    return _active


def active_backend():
    return _active_name


def _init_from_env():
    choice = os.environ.get("DUMMYPROTO_BACKEND", "").strip().lower()
    if choice:
        set_backend(choice)
        return
    try:
        set_backend("numba")
    except ImportError:
        set_backend("numpy")


_init_from_env()


def finite_sum(x):
    return _active.finite_sum(x)


def pad2d(x, pad, out):
    return _active.pad2d(x, pad, out)


def conv2d_fwd(xp, w, bias, out):
    return _active.conv2d_fwd(xp, w, bias, out)


def conv2d_wgrad(xp, dy, dw):
    return _active.conv2d_wgrad(xp, dy, dw)


def maxpool2_fwd(x, out, idx):
    return _active.maxpool2_fwd(x, out, idx)


def maxpool2_bwd(dy, idx, dx):
    return _active.maxpool2_bwd(dy, idx, dx)


def relu_fwd(x, out):
    return _active.relu_fwd(x, out)


def relu_bwd(x, dy, dx):
    return _active.relu_bwd(x, dy, dx)


def bn2d_stats(x, mean, var):
    return _active.bn2d_stats(x, mean, var)


def bn2d_fwd(x, mean, inv_std, gamma, beta, out):
    return _active.bn2d_fwd(x, mean, inv_std, gamma, beta, out)


def bn2d_bwd_sums(x, mean, inv_std, dy, sum_dy, sum_dy_xhat):
    return _active.bn2d_bwd_sums(x, mean, inv_std, dy, sum_dy, sum_dy_xhat)


def bn2d_bwd(x, mean, inv_std, gamma, dy, sum_dy, sum_dy_xhat, dx):
    return _active.bn2d_bwd(x, mean, inv_std, gamma, dy, sum_dy, sum_dy_xhat, dx)
