"""Pure-Python/numpy versions of the compiled kernels.

Same signatures and results as ``_ckernels``. The Toeplitz hash takes a
different route (FFT convolution rather than packed-word AND/parity), which
keeps the two backends useful as cross-checks of each other.
"""
from __future__ import annotations

import numpy as np

_CHUNK_PAIRS = 4_000_000


def lag_histogram(t1, c1, t2, c2, lo, hi, bin_width):
    t1 = np.asarray(t1, dtype=np.int64)
    t2 = np.asarray(t2, dtype=np.int64)
    c1 = np.asarray(c1, dtype=np.uint8)
    c2 = np.asarray(c2, dtype=np.uint8)
    nbins = int((hi - lo + bin_width - 1) // bin_width)
    out = np.zeros((nbins, 3), dtype=np.int64)
    if t1.size == 0 or t2.size == 0:
        return out
    first = np.searchsorted(t2, t1 + lo, side="left")
    last = np.searchsorted(t2, t1 + hi, side="left")
    counts = last - first
    i = 0
    n1 = t1.size
    while i < n1:
        # grow the slice until it holds roughly _CHUNK_PAIRS pairs
        csum = np.cumsum(counts[i:])
        j = i + max(1, int(np.searchsorted(csum, _CHUNK_PAIRS, side="right")))
        j = min(j, n1)
        cnt = counts[i:j]
        total = int(cnt.sum())
        if total:
            owner = np.repeat(np.arange(i, j), cnt)
            offs = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
            partner = first[owner] + offs
            d = t2[partner] - t1[owner]
            b = (d - lo) // bin_width
            out[:, 0] += np.bincount(b, minlength=nbins)
            a = c1[owner]
            c = c2[partner]
            same = (a < 4) & (c < 4) & ((a >> 1) == (c >> 1))
            agree = same & ((a & 1) == (c & 1))
            out[:, 1] += np.bincount(b[agree], minlength=nbins)
            out[:, 2] += np.bincount(b[same & ~agree], minlength=nbins)
        i = j
    return out


def match_coincidences(ta, tb, half_window):
    ta = np.asarray(ta, dtype=np.int64).tolist()
    tb = np.asarray(tb, dtype=np.int64).tolist()
    na, nb = len(ta), len(tb)
    ia: list[int] = []
    ib: list[int] = []
    i = j = 0
    while i < na and j < nb:
        d = tb[j] - ta[i]
        if d < -half_window:
            j += 1
            continue
        if d > half_window:
            i += 1
            continue
        d = abs(d)
        if i + 1 < na and abs(tb[j] - ta[i + 1]) < d:
            i += 1
            continue
        if j + 1 < nb and abs(tb[j + 1] - ta[i]) < d:
            j += 1
            continue
        ia.append(i)
        ib.append(j)
        i += 1
        j += 1
    return np.asarray(ia, dtype=np.int64), np.asarray(ib, dtype=np.int64)


def dead_time_mask(t, ch, dead_time, n_channels):
    t = np.asarray(t, dtype=np.int64)
    ch = np.asarray(ch, dtype=np.uint8)
    keep = np.zeros(t.size, dtype=bool)
    for c in range(n_channels):
        idx = np.flatnonzero(ch == c)
        if idx.size == 0:
            continue
        times = t[idx].tolist()
        last = None
        sel = []
        for k, tt in enumerate(times):
            if last is None or tt - last >= dead_time:
                sel.append(k)
                last = tt
        keep[idx[sel]] = True
    return keep


def toeplitz_hash(key, seed, m):
    key = np.asarray(key, dtype=np.uint8)
    seed = np.asarray(seed, dtype=np.uint8)
    n = key.size
    if seed.size != n + m - 1:
        raise ValueError("seed must hold len(key) + m - 1 bits")
    if m == 0 or n == 0:
        return np.zeros(m, dtype=np.uint8)
    # y_i = sum_j seed[i - j + n - 1] key[j] = (seed * key)[i + n - 1]
    size = 1 << int(np.ceil(np.log2(seed.size + n)))
    conv = np.fft.irfft(np.fft.rfft(seed.astype(np.float64), size)
                        * np.fft.rfft(key.astype(np.float64), size), size)
    counts = np.rint(conv[n - 1:n - 1 + m]).astype(np.int64)
    return (counts & 1).astype(np.uint8)
