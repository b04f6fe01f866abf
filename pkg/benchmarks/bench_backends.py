"""Compare the numba and numpy kernel backends on representative shapes.

    python3 benchmarks/bench_backends.py [--reps 20] [--csv out.csv]

Each kernel is run once per backend before timing (numba compiles on first
call); the median over ``--reps`` runs is reported together with the largest
absolute difference between the two backends' outputs.
"""
import argparse
import csv
import statistics
import sys
import time

import numpy as np

from allinone import kernels
from allinone.pruning import PatternLibrary


def _cases(rng):
    b, c, h, k = 32, 16, 14, 3
    xp = rng.standard_normal((b, c, h + 2, h + 2))
    w = rng.standard_normal((32, c, k, k))
    positions = np.array(sorted({tuple(sorted(rng.choice(9, 4, replace=False))) for _ in range(40)})[:8])
    lib = PatternLibrary(positions)
    n_kernels = 32 * c
    kout, kin = np.divmod(np.arange(n_kernels), c)
    kpat = rng.integers(0, len(lib), n_kernels)
    kidx = np.sort(rng.choice(n_kernels, n_kernels // 2, replace=False))
    pvals = rng.standard_normal(4 * n_kernels)
    cols = np.ascontiguousarray(kernels.numpy_impl.im2col(xp, k, k, 1).reshape(b, h * h, -1).transpose(0, 2, 1))
    o, ncol = 4, c * k * k
    grow, gcol = np.divmod(np.arange(8 * ncol), ncol)
    gidx = np.sort(rng.choice(len(grow), len(grow) // 2, replace=False))
    bvals = rng.standard_normal(o * len(grow))
    x4 = rng.standard_normal((b, c, h, h))
    gamma, beta = rng.uniform(0.5, 1.5, c), rng.standard_normal(c)
    _, xhat, _, _, inv = kernels.numpy_impl.bn_train_forward(x4, gamma, beta, 1e-5)
    dy = rng.standard_normal(x4.shape)
    pooled, arg = kernels.numpy_impl.maxpool_forward(xp, 2, 2)
    return {
        "im2col": lambda m: m.im2col(xp, k, k, 1),
        "conv2d_direct": lambda m: m.conv2d_direct(xp, w, 1),
        "maxpool_forward": lambda m: m.maxpool_forward(xp, 2, 2)[0],
        "maxpool_backward": lambda m: m.maxpool_backward(np.ones_like(pooled), arg, xp.shape, 2, 2),
        "pattern_conv": lambda m: m.pattern_conv(xp, pvals, kidx, kout, kin, kpat, lib.offsets, 32, 1, h, h),
        "block_matmul": lambda m: m.block_matmul(cols, bvals, gidx, grow, gcol, o, 32),
        "bn_train_forward": lambda m: m.bn_train_forward(x4, gamma, beta, 1e-5)[0],
        "bn_train_backward": lambda m: m.bn_train_backward(dy, xhat, gamma, inv)[0],
    }


def _median_ns(fn, reps):
    fn()
    times = []
    for _ in range(reps):
        t = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t)
    return statistics.median(times)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--csv")
    args = p.parse_args(argv)
    if kernels.numba_impl is None:
        print("numba is not installed; nothing to compare", file=sys.stderr)
        return 1
    rows = []
    for name, call in _cases(np.random.default_rng(0)).items():
        diff = float(np.max(np.abs(call(kernels.numba_impl) - call(kernels.numpy_impl))))
        t_nb = _median_ns(lambda: call(kernels.numba_impl), args.reps)
        t_np = _median_ns(lambda: call(kernels.numpy_impl), args.reps)
        rows.append({"kernel": name, "numba_ms": t_nb / 1e6, "numpy_ms": t_np / 1e6,
                     "speedup": t_np / t_nb, "max_abs_diff": diff})
    print(f"{'kernel':<18} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8} {'max diff':>10}")
    for r in rows:
        print(f"{r['kernel']:<18} {r['numba_ms']:>10.3f} {r['numpy_ms']:>10.3f} {r['speedup']:>7.2f}x "
              f"{r['max_abs_diff']:>10.1e}")
    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
