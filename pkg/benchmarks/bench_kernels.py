"""Compare the numba and numpy kernel backends on the hot shapes.

The shapes are what one training episode pushes through the encoder
(batch 75, 16 channels, 40x98 input). Run:

    python benchmarks/bench_kernels.py [--batch 75] [--channels 16]
"""

import argparse
import time

import numpy as np

from dummyproto import kernels


def timeit(fn, n=15):
    fn()
    t0 = time.perf_counter()
    for _ in range(n):
        fn()
    return (time.perf_counter() - t0) / n * 1e3


def encoder_shapes(batch, channels, bins=40, frames=98):
    shapes = []
    h, w, ci = bins, frames, 1
    for _ in range(4):
        shapes.append(((batch, ci, h, w), (channels, ci, 3, 3)))
        h, w, ci = h // 2, w // 2, channels
    return shapes


def bench_backend(name, batch, channels):
    kernels.set_backend(name)
    rng = np.random.default_rng(0)
    rows = {}

    t_conv = t_wgrad = t_pool = t_bn = t_relu = 0.0
    for xs, ws in encoder_shapes(batch, channels):
        b, ci, h, w = xs
        co = ws[0]
        x = rng.standard_normal(xs)
        wt = rng.standard_normal(ws)
        xp = np.zeros((b, ci, h + 2, w + 2))
        kernels.pad2d(x, 1, xp)
        out = np.empty((b, co, h, w))
        bias = np.zeros(co)
        dy = rng.standard_normal(out.shape)
        dw = np.empty(ws)
        t_conv += timeit(lambda: kernels.conv2d_fwd(xp, wt, bias, out))
        t_wgrad += timeit(lambda: kernels.conv2d_wgrad(xp, dy, dw))

        pooled = np.empty((b, co, h // 2, w // 2))
        idx = np.empty(pooled.shape, dtype=np.intp)
        t_pool += timeit(lambda: kernels.maxpool2_fwd(dy, pooled, idx))

        mean = np.empty(co)
        var = np.empty(co)
        t_bn += timeit(lambda: kernels.bn2d_stats(dy, mean, var))
        inv = 1.0 / np.sqrt(np.abs(var) + 1e-5)
        bn_out = np.empty_like(dy)
        t_bn += timeit(lambda: kernels.bn2d_fwd(dy, mean, inv, bias + 1.0, bias, bn_out))
        t_relu += timeit(lambda: kernels.relu_fwd(dy, bn_out))

    rows["conv2d_fwd"] = t_conv
    rows["conv2d_wgrad"] = t_wgrad
    rows["maxpool2_fwd"] = t_pool
    rows["batchnorm fwd"] = t_bn
    rows["relu_fwd"] = t_relu
    return rows


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=75)
    ap.add_argument("--channels", type=int, default=16)
    args = ap.parse_args()

    backends = kernels.available_backends()
    results = {b: bench_backend(b, args.batch, args.channels) for b in backends}
    names = list(next(iter(results.values())))
    width = max(len(n) for n in names)
    header = f"{'kernel (episode total)':<{width + 2}}" + "".join(f"{b:>12}" for b in backends)
    print(header)
    print("-" * len(header))
    for n in names:
        line = f"{n:<{width + 2}}"
        for b in backends:
            line += f"{results[b][n]:>10.2f}ms"
        print(line)
    totals = {b: sum(results[b].values()) for b in backends}
    line = f"{'total':<{width + 2}}"
    for b in backends:
        line += f"{totals[b]:>10.2f}ms"
    print("-" * len(header))
    print(line)


if __name__ == "__main__":
    main()
