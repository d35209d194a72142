"""Compare the compiled and numpy kernel backends on training-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Prints one line per kernel: best-of-N wall time for each backend, the speedup,
and the max absolute difference between the two outputs.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np
from threadpoolctl import threadpool_limits

from midline.kernels import get_backend


def cases(rng):
    x = rng.standard_normal((8, 16, 64, 48)).astype(np.float32)
    cols = rng.standard_normal((8, 16 * 9, 64 * 48)).astype(np.float32)
    img = rng.standard_normal((8, 1, 128, 96)).astype(np.float32)
    yy, xx = np.mgrid[0:128, 0:96].astype(np.float32)
    gx = xx + rng.uniform(-3, 3, (8, 128, 96)).astype(np.float32)
    gy = yy + rng.uniform(-3, 3, (8, 128, 96)).astype(np.float32)
    g = rng.standard_normal(img.shape).astype(np.float32)
    return {
        "im2col 8x16x64x48 k3": lambda k: k.im2col(x, 3, 1, 1),
        "col2im 8x16x64x48 k3": lambda k: k.col2im(cols, 16, 64, 48, 3, 1, 1),
        "bilinear_sample 8x128x96": lambda k: k.bilinear_sample(img, gx, gy, 0.0),
        "bilinear_backward 8x128x96": lambda k: k.bilinear_sample_backward(g, img, gx, gy, 0.0),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    try:
        fast = get_backend("cython")
    except ImportError:
        print("compiled backend not built; only the numpy backend is available")
        return 1
    slow = get_backend("python")
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} {'cython ms':>10s} {'numpy ms':>10s} {'speedup':>8s} {'max diff':>10s}")
    with threadpool_limits(limits=1):
        for name, fn in cases(rng).items():
            t_fast = min(timeit.repeat(lambda: fn(fast), number=1, repeat=args.repeat))
            t_slow = min(timeit.repeat(lambda: fn(slow), number=1, repeat=args.repeat))
            a, b = fn(fast), fn(slow)
            a = a if isinstance(a, tuple) else (a,)
            b = b if isinstance(b, tuple) else (b,)
            diff = max(float(np.max(np.abs(u - v))) for u, v in zip(a, b))
            print(f"{name:28s} {t_fast * 1e3:10.2f} {t_slow * 1e3:10.2f} "
                  f"{t_slow / t_fast:7.1f}x {diff:10.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
