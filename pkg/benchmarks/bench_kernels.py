"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--reps 20]

Times conv2d (dense 3×3, depthwise 31×31) and the 2-D DFT on both
backends and checks they agree.
"""
import argparse
import statistics
import time

import numpy as np

from sodkit import backend
from sodkit.tensor import Conv2dParams, conv2d, dft2


def median_time(fn, reps):
    ts = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return statistics.median(ts)


def cases(rng):
    x = rng.normal(size=(1, 16, 64, 64))
    dense = Conv2dParams(rng.normal(size=(16, 16, 3, 3)), rng.normal(size=16), padding=1)
    yield "conv 3x3 16->16 @64", lambda k: conv2d(x, dense, k)
    xd = rng.normal(size=(1, 8, 64, 64))
    dw = Conv2dParams(rng.normal(size=(8, 1, 31, 31)), None, padding=15, groups=8)
    yield "depthwise 31x31 x8 @64", lambda k: conv2d(xd, dw, k)
    xs = rng.normal(size=(1, 8, 64, 64))
    yield "dft2 8x64x64", lambda k: dft2(xs, k)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--reps", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    names = backend.available()
    print(f"{'case':<26}" + "".join(f"{n + ' ms':>14}" for n in names) + f"{'max |diff|':>14}")
    for label, fn in cases(rng):
        times, outs = [], []
        for n in names:
            k = backend.get(n)
            outs.append(fn(k))
            times.append(median_time(lambda: fn(k), args.reps))
        diff = float(np.abs(outs[0] - outs[-1]).max())
        print(f"{label:<26}" + "".join(f"{1e3 * t:>14.3f}" for t in times) + f"{diff:>14.2e}")


if __name__ == "__main__":
    main()
