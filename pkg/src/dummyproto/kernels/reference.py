"""Pure-numpy kernel backend.

Vectorized but allocation-light: every function writes into an output array
owned by the caller. Convolutions accumulate one tensordot per kernel tap,
which keeps the arithmetic in BLAS without materializing an im2col matrix.
"""

import numpy as np


def finite_sum(x):
    return float(np.sum(x))


def pad2d(x, pad, out):
    if pad:
        out[:, :, :pad, :] = 0.0
        out[:, :, -pad:, :] = 0.0
        out[:, :, pad:-pad, :pad] = 0.0
        out[:, :, pad:-pad, -pad:] = 0.0
        out[:, :, pad:-pad, pad:-pad] = x
    else:
        out[:] = x
    return out


def conv2d_fwd(xp, w, bias, out):
    """Correlate pre-padded xp (B,CI,HP,WP) with w (CO,CI,KH,KW) into out."""
    co, ci, kh, kw = w.shape
    oh, ow = out.shape[2], out.shape[3]
    out[:] = bias[None, :, None, None]
    for ky in range(kh):
        for kx in range(kw):
            patch = xp[:, :, ky : ky + oh, kx : kx + ow]
            # (CO,CI) x (B,CI,OH,OW) contracted over CI -> (CO,B,OH,OW)
            contrib = np.tensordot(w[:, :, ky, kx], patch, axes=([1], [1]))
            out += contrib.transpose(1, 0, 2, 3)
    return out


def conv2d_wgrad(xp, dy, dw):
    co, ci, kh, kw = dw.shape
    oh, ow = dy.shape[2], dy.shape[3]
    for ky in range(kh):
        for kx in range(kw):
            patch = xp[:, :, ky : ky + oh, kx : kx + ow]
            dw[:, :, ky, kx] = np.tensordot(dy, patch, axes=([0, 2, 3], [0, 2, 3]))
    return dw


def _pool_windows(x):
    b, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    v = x[:, :, : oh * 2, : ow * 2].reshape(b, c, oh, 2, ow, 2)
    # window cells in row-major order (0,0),(0,1),(1,0),(1,1)
    return np.stack(
        [v[:, :, :, 0, :, 0], v[:, :, :, 0, :, 1], v[:, :, :, 1, :, 0], v[:, :, :, 1, :, 1]],
        axis=-1,
    )


def maxpool2_fwd(x, out, idx):
    cand = _pool_windows(x)
    np.argmax(cand, axis=-1, out=idx)
    out[:] = np.take_along_axis(cand, idx[..., None], axis=-1)[..., 0]
    return out


def maxpool2_bwd(dy, idx, dx):
    b, c, oh, ow = dy.shape
    dx[:] = 0.0
    rows = idx // 2
    cols = idx % 2
    yy = (2 * np.arange(oh)[None, None, :, None] + rows).ravel()
    xx = (2 * np.arange(ow)[None, None, None, :] + cols).ravel()
    bb = np.broadcast_to(np.arange(b)[:, None, None, None], idx.shape).ravel()
    cc = np.broadcast_to(np.arange(c)[None, :, None, None], idx.shape).ravel()
    dx[bb, cc, yy, xx] = dy.ravel()
    return dx


def relu_fwd(x, out):
    return np.maximum(x, 0.0, out=out)


def relu_bwd(x, dy, dx):
    np.multiply(dy, x > 0.0, out=dx)
    return dx


def bn2d_stats(x, mean, var):
    np.mean(x, axis=(0, 2, 3), out=mean)
    np.mean(np.square(x - mean[None, :, None, None]), axis=(0, 2, 3), out=var)
    return mean, var


def bn2d_fwd(x, mean, inv_std, gamma, beta, out):
    np.subtract(x, mean[None, :, None, None], out=out)
    out *= (gamma * inv_std)[None, :, None, None]
    out += beta[None, :, None, None]
    return out


def bn2d_bwd_sums(x, mean, inv_std, dy, sum_dy, sum_dy_xhat):
    np.sum(dy, axis=(0, 2, 3), out=sum_dy)
    xhat_dy = dy * (x - mean[None, :, None, None])
    np.sum(xhat_dy, axis=(0, 2, 3), out=sum_dy_xhat)
    sum_dy_xhat *= inv_std
    return sum_dy, sum_dy_xhat


def bn2d_bwd(x, mean, inv_std, gamma, dy, sum_dy, sum_dy_xhat, dx):
    b, c, h, w = x.shape
    m = b * h * w
    np.subtract(x, mean[None, :, None, None], out=dx)
    dx *= (inv_std * sum_dy_xhat / m)[None, :, None, None]
    dx += (sum_dy / m)[None, :, None, None]
    np.subtract(dy, dx, out=dx)
    dx *= (gamma * inv_std)[None, :, None, None]
    return dx
