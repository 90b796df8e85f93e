"""Compiled vs numpy-fallback Jacobi kernels.

    python3 benchmarks/bench_kernels.py [--sizes 20 80 160 336] [--repeat 3]

Prints one row per kernel and size with the best-of-``repeat`` time for
each backend and whether the two results are bit-identical.
"""

import argparse
import time

import numpy as np

from fedduap.nnkernel import _pykernels

try:
    from fedduap.nnkernel import _core
except ImportError:
    _core = None


def best_of(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def cases(n, rng):
    b = rng.normal(size=(n, n))
    sym = np.ascontiguousarray((b + b.T) / 2)
    limit = 1e-10 * max(1.0, float(np.linalg.norm(sym)))
    # feature-map-like: tall, low rank
    tall = np.ascontiguousarray(rng.normal(size=(n, 4)) @ rng.normal(size=(4, max(2, n // 4))))
    return [
        ("eigen", lambda k: k.jacobi_eigenvalues(sym.copy(), limit, 100)),
        ("svd", lambda k: k.jacobi_singular_values(tall.copy(), 100)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[20, 80, 160, 336])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if _core is None:
        print("compiled kernels are not built; only the fallback can be timed")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<7}{'n':>5}{'cython s':>12}{'python s':>12}{'speedup':>9}  identical")
    for n in args.sizes:
        for name, run in cases(n, rng):
            tp, rp = best_of(lambda: run(_pykernels), args.repeat)
            if _core is None:
                print(f"{name:<7}{n:>5}{'-':>12}{tp:>12.4f}{'-':>9}  -")
                continue
            tc, rc = best_of(lambda: run(_core), args.repeat)
            same = np.asarray(rc[0]).tobytes() == np.asarray(rp[0]).tobytes() and rc[1] == rp[1]
            print(f"{name:<7}{n:>5}{tc:>12.4f}{tp:>12.4f}{tp / tc:>8.1f}x  {same}")


if __name__ == "__main__":
    main()
