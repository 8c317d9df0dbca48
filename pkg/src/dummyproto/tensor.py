"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation records its inputs and a backward rule on the implicit
tape (creation order is a topological order, and backward walks it in
exact reverse). Outputs of all operations are checked for NaN/Inf and an
error is raised at the op that produced them.

Large intermediate buffers can be recycled across iterations through the
module arena: inside an ``arena_scope()`` the caller promises that, by the
time it calls ``recycle()``, no tensor from the previous iteration is
still alive.
"""

import itertools
import math
from contextlib import contextmanager

import numpy as np

from . import kernels
from .errors import GraphError, NumericsError, ShapeError

_ORDER = itertools.count(1)
_GRAD_MODE = [True]


class Arena:
    """Shape-keyed recycler for float64/index scratch buffers."""

    def __init__(self):
        self._free = {}
        self._lent = []
        self._depth = 0

    @property
    def enabled(self):
        return self._depth > 0

    def take(self, shape, dtype=np.float64):
        if not self.enabled:
            return np.empty(shape, dtype=dtype)
        key = (tuple(shape), np.dtype(dtype).char)
        stack = self._free.get(key)
        arr = stack.pop() if stack else np.empty(shape, dtype=dtype)
        self._lent.append((key, arr))
        return arr

    def recycle(self):
        """Return all lent buffers to the free lists. Callers must not hold
        references to tensors created since the previous recycle()."""
        for key, arr in self._lent:
            self._free.setdefault(key, []).append(arr)
        self._lent.clear()


ARENA = Arena()


@contextmanager
def arena_scope():
    ARENA._depth += 1
    try:
        yield ARENA
    finally:
        ARENA._depth -= 1
        if ARENA._depth == 0:
            ARENA.recycle()


def _take(shape, dtype=np.float64):
    return ARENA.take(shape, dtype)


def _require_finite(arr, what):
    # a single pass: the sum is non-finite iff some element is (or the sum
    # overflows, which at desk scale only happens via non-finite inputs)
    if arr.flags.c_contiguous:
        s = kernels.finite_sum(arr)
    else:
        s = float(arr.sum())
    if not math.isfinite(s):
        bad = np.count_nonzero(~np.isfinite(arr))
        raise NumericsError(f"{what} produced {bad} non-finite value(s)")


class Tensor:
    """Dense float64 array, optionally tracked for reverse-mode gradients."""

    __slots__ = ("data", "grad", "grad_enabled", "name", "_parents", "_bwd", "_order", "_spent")

    def __init__(self, data, grad_enabled=False, name=None):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        _require_finite(arr, name or "tensor input")
        self.data = arr
        self.grad_enabled = grad_enabled
        self.grad = np.zeros_like(arr) if grad_enabled else None
        self.name = name
        self._parents = ()
        self._bwd = None
        self._order = next(_ORDER)
        self._spent = False

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad_enabled={self.grad_enabled}, name={self.name})"

    def zero_grad(self):
        if self.grad_enabled:
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            else:
                self.grad.fill(0.0)

    def item(self):
        return float(self.data.reshape(-1)[0])

    # operator sugar for the common arithmetic
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


@contextmanager
def no_grad():
    _GRAD_MODE.append(False)
    try:
        yield
    finally:
        _GRAD_MODE.pop()


def _recording(parents):
    return _GRAD_MODE[-1] and any(p.grad_enabled for p in parents)


def _result(data, parents, bwd_builder, what):
    """Wrap op output; record on the tape only when some input is tracked."""
    _require_finite(data, what)
    t = Tensor.__new__(Tensor)
    t.data = data
    t.name = None
    t.grad = None
    t._order = next(_ORDER)
    t._spent = False
    if _recording(parents):
        t.grad_enabled = True
        t._parents = tuple(parents)
        t._bwd = bwd_builder()
    else:
        t.grad_enabled = False
        t._parents = ()
        t._bwd = None
    return t


def _accum(t, g):
    if not t.grad_enabled:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g
    if not t._parents:  # leaf: surface non-finite gradients right away
        _require_finite(t.grad, f"gradient of {t.name or 'leaf'}")


def backward(loss):
    """Run reverse-mode accumulation from a scalar loss into leaf grads.

    The recorded tape is consumed: calling backward twice on the same
    forward pass raises.
    """
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.data.shape}")
    if loss._spent:
        raise GraphError("tape already consumed; run the forward pass again")
    if not loss._parents:
        raise GraphError("loss is detached: no operations were recorded")

    nodes = []
    stack = [loss]
    seen = {id(loss)}
    while stack:
        t = stack.pop()
        nodes.append(t)
        for p in t._parents:
            if id(p) not in seen:
                seen.add(id(p))
                if p._parents:
                    stack.append(p)
    nodes.sort(key=lambda t: t._order, reverse=True)

    loss.grad = np.ones_like(loss.data)
    for t in nodes:
        if t._bwd is None or t.grad is None:
            continue
        fn = t._bwd
        t._bwd = None
        t._spent = True
        fn(t.grad)
    loss._spent = True


def _unbroadcast(g, shape):
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _binary(a, b, forward, da, db, what):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out_shape = np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError as e:
        raise ShapeError(f"{what}: {e}") from None
    data = forward(a.data, b.data, _take(out_shape))

    def build():
        def bwd(g):
            if a.grad_enabled:
                _accum(a, _unbroadcast(da(g, a.data, b.data), a.data.shape))
            if b.grad_enabled:
                _accum(b, _unbroadcast(db(g, a.data, b.data), b.data.shape))

        return bwd

    return _result(data, (a, b), build, what)


def add(a, b):
    return _binary(a, b, lambda x, y, o: np.add(x, y, out=o),
                   lambda g, x, y: g, lambda g, x, y: g, "add")


def sub(a, b):
    return _binary(a, b, lambda x, y, o: np.subtract(x, y, out=o),
                   lambda g, x, y: g, lambda g, x, y: -g, "sub")


def mul(a, b):
    return _binary(a, b, lambda x, y, o: np.multiply(x, y, out=o),
                   lambda g, x, y: g * y, lambda g, x, y: g * x, "mul")


def scale(a, s):
    a = _as_tensor(a)
    s = float(s)
    data = np.multiply(a.data, s, out=_take(a.data.shape))

    def build():
        def bwd(g):
            _accum(a, g * s)

        return bwd

    return _result(data, (a,), build, "scale")


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")
    data = np.matmul(a.data, b.data, out=_take((a.data.shape[0], b.data.shape[1])))

    def build():
        def bwd(g):
            if a.grad_enabled:
                _accum(a, g @ b.data.T)
            if b.grad_enabled:
                _accum(b, a.data.T @ g)

        return bwd

    return _result(data, (a, b), build, "matmul")


def relu(a, in_place=False):
    """Elementwise max(x, 0).

    in_place overwrites the input buffer; only safe when the producer of
    that buffer does not need its own output for backward (true for
    batchnorm, whose backward reads its input). The backward mask comes
    from the output sign, which is identical either way.
    """
    a = _as_tensor(a)
    out = a.data if in_place else _take(a.data.shape)
    data = kernels.relu_fwd(a.data, out)

    def build():
        def bwd(g):
            _accum(a, kernels.relu_bwd(data, g, _take(a.data.shape)))

        return bwd

    return _result(data, (a,), build, "relu")


def _pad2d(x, pad):
    """Copy x into a zero-bordered buffer."""
    b, c, h, w = x.shape
    return kernels.pad2d(x, pad, _take((b, c, h + 2 * pad, w + 2 * pad)))


def conv2d(x, w, bias=None, padding=1):
    """2-D correlation, stride 1, zero padding on both spatial axes.

    bias may be None (conv blocks followed by batchnorm have no use for
    one: the normalization cancels any per-channel offset).
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"conv2d: input {x.data.shape} vs weight {w.data.shape}")
    bn, ci, h, ww = x.data.shape
    co, _, kh, kw = w.data.shape
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.data.shape != (co,):
            raise ShapeError(f"conv2d: bias {bias.data.shape} vs {co} output channels")
    pad = int(padding)
    if pad < 0 or pad > kh - 1 or pad > kw - 1:
        raise ShapeError(f"conv2d: padding {pad} out of range for kernel {kh}x{kw}")
    oh, ow = h + 2 * pad - kh + 1, ww + 2 * pad - kw + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{ww}")
    xp = _pad2d(x.data, pad)
    bias_arr = bias.data if bias is not None else np.zeros(co)
    data = kernels.conv2d_fwd(xp, w.data, bias_arr, _take((bn, co, oh, ow)))
    parents = (x, w) if bias is None else (x, w, bias)

    def build():
        def bwd(g):
            if w.grad_enabled:
                _accum(w, kernels.conv2d_wgrad(xp, g, _take(w.data.shape)))
            if bias is not None and bias.grad_enabled:
                _accum(bias, g.sum(axis=(0, 2, 3)))
            if x.grad_enabled:
                wt = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                gp = _pad2d(g, kh - 1 - pad)
                dx = kernels.conv2d_fwd(gp, wt, np.zeros(ci), _take(x.data.shape))
                _accum(x, dx)

        return bwd

    return _result(data, parents, build, "conv2d")


def maxpool2x2(x):
    """2x2 max pool, stride 2; odd trailing rows/columns are dropped.

    Gradient routes to the first maximal element of each window in
    row-major order.
    """
    x = _as_tensor(x)
    if x.data.ndim != 4 or x.data.shape[2] < 2 or x.data.shape[3] < 2:
        raise ShapeError(f"maxpool2x2: input {x.data.shape}")
    b, c, h, w = x.data.shape
    out_shape = (b, c, h // 2, w // 2)
    idx = _take(out_shape, np.intp)
    data = kernels.maxpool2_fwd(x.data, _take(out_shape), idx)

    def build():
        def bwd(g):
            _accum(x, kernels.maxpool2_bwd(g, idx, _take(x.data.shape)))

        return bwd

    return _result(data, (x,), build, "maxpool2x2")


class BatchNormState:
    """Running statistics for one batchnorm layer (eval-mode inputs)."""

    def __init__(self, channels):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)


def batchnorm2d(x, gamma, beta, state, training, momentum=0.1, eps=1e-5):
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.data.ndim != 4 or gamma.data.shape != (x.data.shape[1],) or beta.data.shape != gamma.data.shape:
        raise ShapeError(f"batchnorm2d: input {x.data.shape}, gamma {gamma.data.shape}")
    c = x.data.shape[1]
    if training:
        mean, var = kernels.bn2d_stats(x.data, np.empty(c), np.empty(c))
        state.mean *= 1.0 - momentum
        state.mean += momentum * mean
        state.var *= 1.0 - momentum
        state.var += momentum * var
    else:
        mean, var = state.mean, state.var
    inv_std = 1.0 / np.sqrt(var + eps)
    data = kernels.bn2d_fwd(x.data, mean, inv_std, gamma.data, beta.data, _take(x.data.shape))

    def build():
        def bwd(g):
            sum_dy, sum_dy_xhat = kernels.bn2d_bwd_sums(
                x.data, mean, inv_std, g, np.empty(c), np.empty(c)
            )
            if gamma.grad_enabled:
                _accum(gamma, sum_dy_xhat.copy())
            if beta.grad_enabled:
                _accum(beta, sum_dy.copy())
            if x.grad_enabled:
                if training:
                    dx = kernels.bn2d_bwd(
                        x.data, mean, inv_std, gamma.data, g, sum_dy, sum_dy_xhat,
                        _take(x.data.shape),
                    )
                else:
                    dx = g * (gamma.data * inv_std)[None, :, None, None]
                _accum(x, dx)

        return bwd

    return _result(data, (x, gamma, beta), build, "batchnorm2d")


def rowmax(x):
    """Elementwise max across the rows of a 2-D tensor -> shape (1, cols)."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"rowmax: expected 2-D input, got {x.data.shape}")
    arg = x.data.argmax(axis=0)  # first maximal row on ties
    data = x.data[arg, np.arange(x.data.shape[1])][None, :].copy()

    def build():
        def bwd(g):
            dx = np.zeros_like(x.data)
            dx[arg, np.arange(x.data.shape[1])] = g[0]
            _accum(x, dx)

        return bwd

    return _result(data, (x,), build, "rowmax")


def _axis_count(shape, axis):
    if axis is None:
        return int(np.prod(shape))
    return shape[axis]


def sum_(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def build():
        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(g, x.data.shape).copy())

        return bwd

    return _result(np.asarray(data, dtype=np.float64), (x,), build, "sum")


def mean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    n = _axis_count(x.data.shape, axis)
    data = x.data.mean(axis=axis, keepdims=keepdims)

    def build():
        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(g, x.data.shape) / n)

        return bwd

    return _result(np.asarray(data, dtype=np.float64), (x,), build, "mean")


def reshape(x, shape):
    x = _as_tensor(x)
    data = x.data.reshape(shape)

    def build():
        def bwd(g):
            _accum(x, g.reshape(x.data.shape))

        return bwd

    return _result(data, (x,), build, "reshape")


def log_softmax(x, axis=-1):
    """Numerically stable log softmax along one axis (max subtraction)."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse

    def build():
        def bwd(g):
            p = np.exp(data)
            _accum(x, g - p * g.sum(axis=axis, keepdims=True))

        return bwd

    return _result(data, (x,), build, "log_softmax")


def softmax(x, axis=-1):
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def build():
        def bwd(g):
            _accum(x, data * (g - (g * data).sum(axis=axis, keepdims=True)))

        return bwd

    return _result(data, (x,), build, "softmax")


def pairwise_sqdist(a, b):
    """Squared Euclidean distance between all row pairs: (P,D),(R,D) -> (P,R)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ShapeError(f"pairwise_sqdist: {a.data.shape} vs {b.data.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    data = np.einsum("prd,prd->pr", diff, diff)

    def build():
        def bwd(g):
            if a.grad_enabled:
                _accum(a, 2.0 * np.einsum("pr,prd->pd", g, diff))
            if b.grad_enabled:
                _accum(b, -2.0 * np.einsum("pr,prd->rd", g, diff))

        return bwd

    return _result(data, (a, b), build, "pairwise_sqdist")


def rows_sqdist(a, b):
    """Row-paired squared distance: (P,D),(P,D) -> (P,)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape or a.data.ndim != 2:
        raise ShapeError(f"rows_sqdist: {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    data = np.einsum("pd,pd->p", diff, diff)

    def build():
        def bwd(g):
            d = 2.0 * g[:, None] * diff
            if a.grad_enabled:
                _accum(a, d)
            if b.grad_enabled:
                _accum(b, -d)

        return bwd

    return _result(data, (a, b), build, "rows_sqdist")


def concat_cols(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[0] != b.data.shape[0]:
        raise ShapeError(f"concat_cols: {a.data.shape} vs {b.data.shape}")
    na = a.data.shape[1]
    data = np.concatenate([a.data, b.data], axis=1)

    def build():
        def bwd(g):
            if a.grad_enabled:
                _accum(a, g[:, :na].copy())
            if b.grad_enabled:
                _accum(b, g[:, na:].copy())

        return bwd

    return _result(data, (a, b), build, "concat_cols")


def take_per_row(x, idx):
    """Pick one column per row: (P,C) with idx (P,) -> (P,)."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(x.data.shape[0])
    data = x.data[rows, idx].copy()

    def build():
        def bwd(g):
            dx = np.zeros_like(x.data)
            dx[rows, idx] = g
            _accum(x, dx)

        return bwd

    return _result(data, (x,), build, "take_per_row")


def slice_rows(x, start, stop):
    x = _as_tensor(x)
    data = x.data[start:stop].copy()

    def build():
        def bwd(g):
            dx = np.zeros_like(x.data)
            dx[start:stop] = g
            _accum(x, dx)

        return bwd

    return _result(data, (x,), build, "slice_rows")
