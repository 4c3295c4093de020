"""Compiled kernels against the numpy fallback on scenario-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import time

import numpy as np

from qdqkd import _kernels


def workloads(rng):
    # one 10 s segment at the calibrated rates: ~190 kHz Alice singles, ~150 kHz Bob singles
    ta = np.sort(rng.integers(0, 10**13, 1_900_000)).astype(np.int64)
    tb = np.sort(rng.integers(0, 10**13, 1_500_000)).astype(np.int64)
    ca = rng.integers(0, 4, ta.size).astype(np.uint8)
    cb = rng.integers(0, 4, tb.size).astype(np.uint8)
    key = rng.integers(0, 2, 20_000, dtype=np.uint8)
    seed = rng.integers(0, 2, 20_000 + 15_000 - 1, dtype=np.uint8)
    return {
        "lag_histogram (coarse sync, 200k x 1.5M)":
            lambda impl: _kernels.lag_histogram(ta[:200_000], ca[:200_000], tb, cb, -5 * 10**7, 5 * 10**7,
                                                10_000, impl=impl),
        "match_coincidences (1.9M x 1.5M)":
            lambda impl: _kernels.match_coincidences(ta, tb, 500, impl=impl),
        "dead_time_mask (1.9M clicks)":
            lambda impl: _kernels.dead_time_mask(ta, ca, 50_000, impl=impl),
        "toeplitz_hash (20k -> 15k bits)":
            lambda impl: _kernels.toeplitz_hash(key, seed, 15_000, impl=impl),
    }


def best_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    impls = _kernels.backends()
    if "cython" not in impls:
        print("compiled backend not built; only the fallback is timed")
    print(f"{'kernel':45s}" + "".join(f"{name:>12s}" for name in impls) + "     speedup")
    for name, fn in workloads(np.random.default_rng(args.seed)).items():
        t = {b: best_time(lambda: fn(impl), args.repeat) for b, impl in impls.items()}
        speed = f"{t['python'] / t['cython']:10.1f}x" if "cython" in t else ""
        print(f"{name:45s}" + "".join(f"{t[b] * 1e3:10.1f}ms" for b in impls) + speed)


if __name__ == "__main__":
    main()
