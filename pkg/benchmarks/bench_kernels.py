#!/usr/bin/env python3
"""Benchmark the compiled kernels against the pure-NumPy fallback.

Runs the three hot kernels over a grid of problem sizes and, as an
end-to-end probe, a batch of warm-started GT/ML refits (the operation the
bootstrap and simulation loops repeat hundreds of thousands of times).

    python benchmarks/bench_kernels.py
"""

import math
import time

import numpy as np

from saecmse import _kernels_py as pure
from saecmse import fitting
from saecmse.families import FamilyKind, sample_dataset
from saecmse.util import rng_stream

try:
    from saecmse import _core as compiled
except ImportError:
    compiled = None


def _time(fn, repeat):
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat * 1e6  # microseconds


def bench_kernels():
    print(f"{'kernel':<22}{'m':>6}{'pure (us)':>12}{'compiled (us)':>15}{'speedup':>9}")
    rng = rng_stream(42, 0)
    for m in (25, 100, 400):
        n = np.full(m, 10.0)
        X = np.ones((m, 1))
        beta = np.array([0.0])
        _, y = sample_dataset(FamilyKind.POISSON_GAMMA, n, np.ones(m), 15.0, rng)
        reps = max(200, 20000 // m)
        for name, code in (("gt_score", 1), ("gt_score_and_info", 1), ("ml_negloglik", 2)):
            y_use = np.minimum(y, 1.0) if code == 2 else y
            args = (code, y_use, n, X, beta, 15.0)
            t_pure = _time(lambda: getattr(pure, name)(*args), reps)
            if compiled is None:
                print(f"{name:<22}{m:>6}{t_pure:>12.1f}{'n/a':>15}{'':>9}")
                continue
            t_comp = _time(lambda: getattr(compiled, name)(*args), reps)
            print(f"{name:<22}{m:>6}{t_pure:>12.1f}{t_comp:>15.1f}{t_pure / t_comp:>8.1f}x")


def bench_warm_refits():
    import saecmse.kernels as kernels

    m, nu = 25, 15.0
    n = np.full(m, 10.0)
    X = np.ones((m, 1))
    theta = np.array([0.0, math.log(nu)])
    rng = rng_stream(42, 1)
    datasets = [
        sample_dataset(FamilyKind.POISSON_GAMMA, n, np.ones(m), nu, rng)[1]
        for _ in range(200)
    ]
    print(f"\nwarm refits (m={m}), kernels={'compiled' if kernels.USING_COMPILED else 'pure'}:")
    for method in ("gt", "ml"):
        t0 = time.perf_counter()
        n_conv = 0
        for y in datasets:
            raw = fitting.fit_arrays(1, y, n, X, method, theta, warm_only=True)
            n_conv += raw["converged"]
        dt = (time.perf_counter() - t0) / len(datasets) * 1e3
        print(f"  {method}: {dt:.2f} ms/fit ({n_conv}/{len(datasets)} converged)")


if __name__ == "__main__":
    bench_kernels()
    bench_warm_refits()
