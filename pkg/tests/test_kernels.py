import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qdqkd import _kernels

BACKENDS = _kernels.backends()
IMPLS = list(BACKENDS.values())
IDS = list(BACKENDS)


def sorted_times(rng, n, span):
    return np.sort(rng.integers(0, span, n)).astype(np.int64)


def naive_histogram(t1, c1, t2, c2, lo, hi, w):
    nb = (hi - lo + w - 1) // w
    out = np.zeros((nb, 3), dtype=np.int64)
    for a, ca in zip(t1, c1):
        for b, cb in zip(t2, c2):
            d = b - a
            if lo <= d < hi:
                k = (d - lo) // w
                out[k, 0] += 1
                if ca < 4 and cb < 4 and ca >> 1 == cb >> 1:
                    out[k, 1 if (ca & 1) == (cb & 1) else 2] += 1
    return out


def naive_dead_time(t, ch, dead):
    keep = np.zeros(t.size, bool)
    last = {}
    for i, (tt, c) in enumerate(zip(t, ch)):
        if c not in last or tt - last[c] >= dead:
            keep[i] = True
            last[c] = tt
    return keep


@pytest.mark.parametrize("impl", IMPLS, ids=IDS)
class TestAgainstNaive:
    @given(seed=st.integers(0, 2**31), n=st.integers(0, 60))
    @settings(max_examples=25)
    def test_histogram(self, impl, seed, n):
        rng = np.random.default_rng(seed)
        t1, t2 = sorted_times(rng, n, 10_000), sorted_times(rng, n + 3, 10_000)
        c1, c2 = rng.integers(0, 5, n).astype(np.uint8), rng.integers(0, 5, n + 3).astype(np.uint8)
        got = _kernels.lag_histogram(t1, c1, t2, c2, -3000, 2950, 100, impl=impl)
        np.testing.assert_array_equal(got, naive_histogram(t1, c1, t2, c2, -3000, 2950, 100))

    @given(seed=st.integers(0, 2**31), dead=st.integers(0, 500))
    @settings(max_examples=25)
    def test_dead_time(self, impl, seed, dead):
        rng = np.random.default_rng(seed)
        t = sorted_times(rng, 200, 20_000)
        ch = rng.integers(0, 4, 200).astype(np.uint8)
        np.testing.assert_array_equal(_kernels.dead_time_mask(t, ch, dead, impl=impl),
                                      naive_dead_time(t, ch, dead))

    def test_match_window(self, impl):
        ia, ib = _kernels.match_coincidences([0, 1000, 5000], [400, 1700, 5600], 500, impl=impl)
        np.testing.assert_array_equal(ia, [0])
        np.testing.assert_array_equal(ib, [0])

    def test_match_nearest(self, impl):
        ia, ib = _kernels.match_coincidences([0, 300], [290], 500, impl=impl)
        assert (ia.tolist(), ib.tolist()) == ([1], [0])

    def test_toeplitz_identity_seed(self, impl):
        # seed with a single one on the main diagonal is the identity map
        n = 40
        seed = np.zeros(2 * n - 1, np.uint8)
        seed[n - 1] = 1
        key = np.random.default_rng(0).integers(0, 2, n, dtype=np.uint8)
        np.testing.assert_array_equal(_kernels.toeplitz_hash(key, seed, n, impl=impl), key)


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled backend not built")
class TestBackendsAgree:
    @given(seed=st.integers(0, 2**31))
    @settings(max_examples=20)
    def test_match(self, seed):
        rng = np.random.default_rng(seed)
        ta, tb = sorted_times(rng, 3000, 10**8), sorted_times(rng, 3000, 10**8)
        a = _kernels.match_coincidences(ta, tb, 20_000, impl=BACKENDS["python"])
        b = _kernels.match_coincidences(ta, tb, 20_000, impl=BACKENDS["cython"])
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    @given(seed=st.integers(0, 2**31), n=st.integers(1, 3000), m=st.integers(1, 700))
    @settings(max_examples=30)
    def test_toeplitz(self, seed, n, m):
        rng = np.random.default_rng(seed)
        key = rng.integers(0, 2, n, dtype=np.uint8)
        s = rng.integers(0, 2, n + m - 1, dtype=np.uint8)
        np.testing.assert_array_equal(_kernels.toeplitz_hash(key, s, m, impl=BACKENDS["python"]),
                                      _kernels.toeplitz_hash(key, s, m, impl=BACKENDS["cython"]))

    def test_histogram_large(self):
        rng = np.random.default_rng(1)
        t1, t2 = sorted_times(rng, 20_000, 10**10), sorted_times(rng, 20_000, 10**10)
        c1, c2 = rng.integers(0, 4, (2, 20_000)).astype(np.uint8)
        args = (t1, c1, t2, c2, -10**7, 10**7, 10_000)
        np.testing.assert_array_equal(_kernels.lag_histogram(*args, impl=BACKENDS["python"]),
                                      _kernels.lag_histogram(*args, impl=BACKENDS["cython"]))


def test_env_var_selects_fallback():
    env = dict(os.environ, QDQKD_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import qdqkd; print(qdqkd.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_rejects_bad_bins():
    with pytest.raises(ValueError):
        _kernels.lag_histogram([0], [0], [0], [0], 0, 10, 0)
