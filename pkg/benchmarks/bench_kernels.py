"""Timing comparison of the two convolution backends on the shapes this
model actually runs, with a cross-backend agreement column.

Usage: python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from gaitgcn import kernels

# (label, x shape, w shape, stride, dilation)
CASES = [
    ("block1 temporal 3x1", (1, 96, 120, 15), (32, 96, 3, 1), (1, 1), (1, 1)),
    ("block2 strided 3x1", (1, 192, 60, 15), (64, 192, 3, 1), (2, 1), (1, 1)),
    ("block3 dilated 3x1", (1, 384, 30, 15), (128, 384, 3, 1), (1, 1), (2, 1)),
    ("pointwise reduce", (1, 96, 120, 15), (24, 96, 1, 1), (1, 1), (1, 1)),
    ("desk-scale 3x1", (1, 8, 30, 15), (8, 8, 3, 1), (1, 1), (1, 1)),
]


def _pad_for(w_shape, dilation):
    kh = w_shape[2]
    return (dilation[0] * (kh - 1) // 2, 0)


def time_case(backend, x, w, stride, dilation, padding, repeats):
    kernels.use_backend(backend)
    out = kernels.conv2d_forward(x, w, stride, dilation, padding)
    gy = np.ones_like(out)
    kernels.conv2d_backward(x, w, gy, stride, dilation, padding)

    fwd = []
    bwd = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = kernels.conv2d_forward(x, w, stride, dilation, padding)
        fwd.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        gx, gw = kernels.conv2d_backward(x, w, gy, stride, dilation, padding)
        bwd.append(time.perf_counter() - t0)
    return min(fwd), min(bwd), out, gx, gw


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=7)
    args = parser.parse_args()

    backends = kernels.available_backends()
    print(f"available backends: {backends}")
    if len(backends) < 2:
        print("numba unavailable; timing the numpy path only")

    header = (f"{'case':<22} {'fwd numba':>10} {'fwd numpy':>10} "
              f"{'bwd numba':>10} {'bwd numpy':>10} {'max |diff|':>10}")
    print(header)
    print("-" * len(header))
    rng = np.random.default_rng(0)
    for label, x_shape, w_shape, stride, dilation in CASES:
        x = rng.standard_normal(x_shape)
        w = rng.standard_normal(w_shape) / np.sqrt(np.prod(w_shape[1:]))
        padding = _pad_for(w_shape, dilation)
        results = {}
        for backend in backends:
            results[backend] = time_case(backend, x, w, stride, dilation,
                                         padding, args.repeats)
        if len(backends) == 2:
            a, b = (results[backends[0]], results[backends[1]])
            diff = max(np.abs(a[2] - b[2]).max(),
                       np.abs(a[3] - b[3]).max(),
                       np.abs(a[4] - b[4]).max())
            print(f"{label:<22} {a[0] * 1e3:>8.2f}ms {b[0] * 1e3:>8.2f}ms "
                  f"{a[1] * 1e3:>8.2f}ms {b[1] * 1e3:>8.2f}ms {diff:>10.2e}")
        else:
            only = results[backends[0]]
            print(f"{label:<22} {'-':>10} {only[0] * 1e3:>8.2f}ms "
                  f"{'-':>10} {only[1] * 1e3:>8.2f}ms {'-':>10}")


if __name__ == "__main__":
    main()
