"""Compare the numba and pure-numpy order-code kernels.

    python benchmarks/bench_kernels.py [--sizes 10000,100000,1000000] [--repeat 5]

Each kernel is checked for identical output before timing.  The numba
timings exclude JIT compilation (one warm-up call per kernel).
"""

import argparse
import time

import numpy as np

from opeproxy import _kernels

CODE_MAX = _kernels.CODE_MAX


def _best(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(n, rng):
    codes = np.sort(rng.integers(0, np.iinfo(np.int64).max, size=n, dtype=np.int64).astype(np.uint64) * np.uint64(2))
    lo, hi = int(codes[n // 4]), int(codes[3 * n // 4])
    return {
        "midpoint_codes": lambda impl: impl.midpoint_codes(0, CODE_MAX, n),
        "spaced_codes": lambda impl: impl.spaced_codes(n),
        "in_range": lambda impl: impl.in_range(codes, lo, hi),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="10000,100000,1000000")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if _kernels.numba_impl is None:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(args.seed)
    for name, fn in cases(16, rng).items():  # JIT warm-up
        fn(_kernels.numba_impl)
    print(f"{'kernel':<16} {'n':>10} {'numpy s':>10} {'numba s':>10} {'speedup':>8}")
    for n in (int(s) for s in args.sizes.split(",")):
        for name, fn in cases(n, rng).items():
            a, b = fn(_kernels.numpy_impl), fn(_kernels.numba_impl)
            if not np.array_equal(a, b):
                raise SystemExit(f"{name} n={n}: implementations disagree")
            t_np = _best(lambda: fn(_kernels.numpy_impl), args.repeat)
            t_nb = _best(lambda: fn(_kernels.numba_impl), args.repeat)
            print(f"{name:<16} {n:>10,} {t_np:>10.5f} {t_nb:>10.5f} {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
