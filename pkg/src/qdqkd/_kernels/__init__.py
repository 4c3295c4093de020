"""Hot loops of the event-stream pipeline.

The compiled Cython module is used when it was built; otherwise the numpy
fallback is imported. Set ``QDQKD_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

import numpy as np

from . import _fallback

if os.environ.get("QDQKD_PURE_PYTHON", "") not in ("", "0"):
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback
        BACKEND = "python"


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def _u8(a):
    return np.ascontiguousarray(a, dtype=np.uint8)


def lag_histogram(t1, c1, t2, c2, lo, hi, bin_width, impl=None):
    """Binned ``t2 - t1`` differences with polarization agreement counts."""
    impl = impl or _impl
    if bin_width <= 0 or hi <= lo:
        raise ValueError("need bin_width > 0 and hi > lo")
    return impl.lag_histogram(_i64(t1), _u8(c1), _i64(t2), _u8(c2),
                              int(lo), int(hi), int(bin_width))


def match_coincidences(ta, tb, half_window, impl=None):
    impl = impl or _impl
    return impl.match_coincidences(_i64(ta), _i64(tb), int(half_window))


def dead_time_mask(t, ch, dead_time, n_channels=4, impl=None):
    impl = impl or _impl
    return impl.dead_time_mask(_i64(t), _u8(ch), int(dead_time), int(n_channels))


def toeplitz_hash(key, seed, m, impl=None):
    # the FFT product beats the compiled O(nm) loop at key-block sizes
    impl = impl or _fallback
    return impl.toeplitz_hash(_u8(key), _u8(seed), int(m))


def backends() -> dict:
    """All importable kernel implementations, keyed by name."""
    out = {"python": _fallback}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
