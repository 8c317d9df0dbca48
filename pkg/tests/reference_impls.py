"""Independent oracle implementations used only by the tests.

These are written as directly as possible (explicit loops, textbook
formulas) so they share no code path with the package.
"""

import numpy as np


def conv2d_six_loops(x, w, bias, pad):
    """Direct 6-nested-loop 2-D correlation with zero padding."""
    bn, ci, h, ww = x.shape
    co, _, kh, kw = w.shape
    oh, ow = h + 2 * pad - kh + 1, ww + 2 * pad - kw + 1
    xp = np.zeros((bn, ci, h + 2 * pad, ww + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + ww] = x
    out = np.zeros((bn, co, oh, ow))
    for b in range(bn):
        for o in range(co):
            for y in range(oh):
                for xx in range(ow):
                    acc = bias[o]
                    for c in range(ci):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += w[o, c, ky, kx] * xp[b, c, y + ky, xx + kx]
                    out[b, o, y, xx] = acc
    return out


def softmax_rows(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_logsumexp(logits, labels):
    """Mean negative log probability via an explicit log-sum-exp."""
    total = 0.0
    for row, lab in zip(logits, labels):
        m = max(row)
        lse = m + np.log(sum(np.exp(v - m) for v in row))
        total += lse - row[lab]
    return total / len(labels)


def auroc_pairwise(known, unknown):
    """O(n^2) Mann-Whitney with ties counted 0.5."""
    wins = 0.0
    for u in unknown:
        for k in known:
            if u > k:
                wins += 1.0
            elif u == k:
                wins += 0.5
    return wins / (len(known) * len(unknown))
