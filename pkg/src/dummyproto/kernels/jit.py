"""Numba kernel backend.

Same contract as the reference backend. 3x3 convolutions get manually
unrolled inner loops (the encoder's only kernel size); other sizes fall
through to generic loops. Parallel loops are arranged so each output
element is produced by exactly one thread, and fastmath only reassociates
within that thread's fixed iteration order, so results are deterministic
run to run (they may differ from the reference backend by normal
floating-point reordering, well below test tolerances).
"""

import numpy as np
from numba import njit, prange


@njit(parallel=True, cache=True, fastmath=True)
def _conv2d_fwd_3x3(xp, w, bias, out):
    b_n, ci_n = xp.shape[0], xp.shape[1]
    co_n = w.shape[0]
    oh, ow = out.shape[2], out.shape[3]
    for flat in prange(b_n * co_n):
        b = flat // co_n
        co = flat % co_n
        bv = bias[co]
        for y in range(oh):
            row = out[b, co, y]
            for x in range(ow):
                row[x] = bv
            for ci in range(ci_n):
                for ky in range(3):
                    xrow = xp[b, ci, y + ky]
                    w0 = w[co, ci, ky, 0]
                    w1 = w[co, ci, ky, 1]
                    w2 = w[co, ci, ky, 2]
                    for x in range(ow):
                        row[x] += w0 * xrow[x] + w1 * xrow[x + 1] + w2 * xrow[x + 2]
    return out


@njit(parallel=True, cache=True, fastmath=True)
def _conv2d_fwd_any(xp, w, bias, out):
    b_n, ci_n = xp.shape[0], xp.shape[1]
    co_n, _, kh, kw = w.shape
    oh, ow = out.shape[2], out.shape[3]
    for flat in prange(b_n * co_n):
        b = flat // co_n
        co = flat % co_n
        bv = bias[co]
        for y in range(oh):
            row = out[b, co, y]
            for x in range(ow):
                row[x] = bv
            for ci in range(ci_n):
                for ky in range(kh):
                    xrow = xp[b, ci, y + ky]
                    for kx in range(kw):
                        wv = w[co, ci, ky, kx]
                        for x in range(ow):
                            row[x] += wv * xrow[x + kx]
    return out


@njit(parallel=True, cache=True, fastmath=True)
def _conv2d_wgrad_3x3(xp, dy, dw):
    b_n, ci_n = xp.shape[0], xp.shape[1]
    co_n = dy.shape[1]
    oh, ow = dy.shape[2], dy.shape[3]
    for flat in prange(co_n * ci_n):
        co = flat // ci_n
        ci = flat % ci_n
        a00 = 0.0
        a01 = 0.0
        a02 = 0.0
        a10 = 0.0
        a11 = 0.0
        a12 = 0.0
        a20 = 0.0
        a21 = 0.0
        a22 = 0.0
        for b in range(b_n):
            for y in range(oh):
                dyrow = dy[b, co, y]
                x0 = xp[b, ci, y]
                x1 = xp[b, ci, y + 1]
                x2 = xp[b, ci, y + 2]
                for x in range(ow):
                    g = dyrow[x]
                    a00 += g * x0[x]
                    a01 += g * x0[x + 1]
                    a02 += g * x0[x + 2]
                    a10 += g * x1[x]
                    a11 += g * x1[x + 1]
                    a12 += g * x1[x + 2]
                    a20 += g * x2[x]
                    a21 += g * x2[x + 1]
                    a22 += g * x2[x + 2]
        dw[co, ci, 0, 0] = a00
        dw[co, ci, 0, 1] = a01
        dw[co, ci, 0, 2] = a02
        dw[co, ci, 1, 0] = a10
        dw[co, ci, 1, 1] = a11
        dw[co, ci, 1, 2] = a12
        dw[co, ci, 2, 0] = a20
        dw[co, ci, 2, 1] = a21
        dw[co, ci, 2, 2] = a22
    return dw


@njit(parallel=True, cache=True, fastmath=True)
def _conv2d_wgrad_any(xp, dy, dw):
    b_n, ci_n = xp.shape[0], xp.shape[1]
    co_n, _, kh, kw = dw.shape
    oh, ow = dy.shape[2], dy.shape[3]
    for flat in prange(co_n * ci_n):
        co = flat // ci_n
        ci = flat % ci_n
        for ky in range(kh):
            for kx in range(kw):
                acc = 0.0
                for b in range(b_n):
                    for y in range(oh):
                        dyrow = dy[b, co, y]
                        xrow = xp[b, ci, y + ky]
                        for x in range(ow):
                            acc += dyrow[x] * xrow[x + kx]
                dw[co, ci, ky, kx] = acc
    return dw


def conv2d_fwd(xp, w, bias, out):
    if w.shape[2] == 3 and w.shape[3] == 3:
        return _conv2d_fwd_3x3(xp, w, bias, out)
    return _conv2d_fwd_any(xp, w, bias, out)


def conv2d_wgrad(xp, dy, dw):
    if dw.shape[2] == 3 and dw.shape[3] == 3:
        return _conv2d_wgrad_3x3(xp, dy, dw)
    return _conv2d_wgrad_any(xp, dy, dw)


@njit(parallel=True, cache=True, fastmath=True)
def maxpool2_fwd(x, out, idx):
    b_n, c_n = x.shape[0], x.shape[1]
    oh, ow = out.shape[2], out.shape[3]
    for flat in prange(b_n * c_n):
        b = flat // c_n
        c = flat % c_n
        for y in range(oh):
            y0 = 2 * y
            for x0 in range(ow):
                xx = 2 * x0
                best = x[b, c, y0, xx]
                k = 0
                v = x[b, c, y0, xx + 1]
                if v > best:
                    best = v
                    k = 1
                v = x[b, c, y0 + 1, xx]
                if v > best:
                    best = v
                    k = 2
                v = x[b, c, y0 + 1, xx + 1]
                if v > best:
                    best = v
                    k = 3
                out[b, c, y, x0] = best
                idx[b, c, y, x0] = k
    return out


@njit(parallel=True, cache=True, fastmath=True)
def maxpool2_bwd(dy, idx, dx):
    b_n, c_n = dy.shape[0], dy.shape[1]
    oh, ow = dy.shape[2], dy.shape[3]
    h, w = dx.shape[2], dx.shape[3]
    for flat in prange(b_n * c_n):
        b = flat // c_n
        c = flat % c_n
        for y in range(h):
            for x in range(w):
                dx[b, c, y, x] = 0.0
        for y in range(oh):
            for x0 in range(ow):
                k = idx[b, c, y, x0]
                dx[b, c, 2 * y + k // 2, 2 * x0 + k % 2] = dy[b, c, y, x0]
    return dx


# reassociation only: full fastmath would let LLVM assume no NaN/Inf,
# which is exactly what this kernel must detect
@njit(parallel=True, cache=True, fastmath={"reassoc", "contract"})
def _finite_sum_flat(x):
    s = 0.0
    for i in prange(x.size):
        s += x[i]
    return s


def finite_sum(x):
    flat = x.reshape(-1)
    if flat.size == 0:
        return 0.0
    return _finite_sum_flat(flat)


@njit(parallel=True, cache=True, fastmath=True)
def pad2d(x, pad, out):
    """Zero border plus center copy in one parallel pass."""
    b_n, c_n, h, w = x.shape
    hp, wp = out.shape[2], out.shape[3]
    for flat in prange(b_n * c_n):
        b = flat // c_n
        c = flat % c_n
        for y in range(hp):
            row = out[b, c, y]
            sy = y - pad
            if sy < 0 or sy >= h:
                for xx in range(wp):
                    row[xx] = 0.0
            else:
                for xx in range(pad):
                    row[xx] = 0.0
                xrow = x[b, c, sy]
                for xx in range(w):
                    row[pad + xx] = xrow[xx]
                for xx in range(pad + w, wp):
                    row[xx] = 0.0
    return out


@njit(parallel=True, cache=True, fastmath=True)
def _relu_fwd_flat(x, out):
    for i in prange(x.size):
        v = x[i]
        out[i] = v if v > 0.0 else 0.0
    return out


@njit(parallel=True, cache=True, fastmath=True)
def _relu_bwd_flat(x, dy, dx):
    for i in prange(x.size):
        dx[i] = dy[i] if x[i] > 0.0 else 0.0
    return dx


def relu_fwd(x, out):
    _relu_fwd_flat(x.reshape(-1), out.reshape(-1))
    return out


def relu_bwd(x, dy, dx):
    _relu_bwd_flat(x.reshape(-1), dy.reshape(-1), dx.reshape(-1))
    return dx


@njit(parallel=True, cache=True, fastmath=True)
def bn2d_stats(x, mean, var):
    b_n, c_n, h, w = x.shape
    m = b_n * h * w
    for c in prange(c_n):
        s = 0.0
        s2 = 0.0
        for b in range(b_n):
            for y in range(h):
                for xx in range(w):
                    v = x[b, c, y, xx]
                    s += v
                    s2 += v * v
        mu = s / m
        mean[c] = mu
        var[c] = s2 / m - mu * mu
    return mean, var


@njit(parallel=True, cache=True, fastmath=True)
def bn2d_fwd(x, mean, inv_std, gamma, beta, out):
    b_n, c_n, h, w = x.shape
    for flat in prange(b_n * c_n):
        b = flat // c_n
        c = flat % c_n
        scale = gamma[c] * inv_std[c]
        shift = beta[c] - mean[c] * scale
        for y in range(h):
            for xx in range(w):
                out[b, c, y, xx] = x[b, c, y, xx] * scale + shift
    return out


@njit(parallel=True, cache=True, fastmath=True)
def bn2d_bwd_sums(x, mean, inv_std, dy, sum_dy, sum_dy_xhat):
    b_n, c_n, h, w = x.shape
    for c in prange(c_n):
        s = 0.0
        sx = 0.0
        mu = mean[c]
        for b in range(b_n):
            for y in range(h):
                for xx in range(w):
                    g = dy[b, c, y, xx]
                    s += g
                    sx += g * (x[b, c, y, xx] - mu)
        sum_dy[c] = s
        sum_dy_xhat[c] = sx * inv_std[c]
    return sum_dy, sum_dy_xhat


@njit(parallel=True, cache=True, fastmath=True)
def bn2d_bwd(x, mean, inv_std, gamma, dy, sum_dy, sum_dy_xhat, dx):
    b_n, c_n, h, w = x.shape
    m = b_n * h * w
    for flat in prange(b_n * c_n):
        b = flat // c_n
        c = flat % c_n
        inv = inv_std[c]
        mu = mean[c]
        g_inv = gamma[c] * inv
        mean_dy = sum_dy[c] / m
        mean_dy_xhat = sum_dy_xhat[c] / m
        for y in range(h):
            for xx in range(w):
                xhat = (x[b, c, y, xx] - mu) * inv
                dx[b, c, y, xx] = g_inv * (dy[b, c, y, xx] - mean_dy - xhat * mean_dy_xhat)
    return dx
