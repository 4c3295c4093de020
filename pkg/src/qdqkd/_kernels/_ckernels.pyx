# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled event-stream kernels.

Every function here has a drop-in twin in ``_fallback.py``; the test suite
checks both against each other.
"""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport int64_t, uint64_t, uint8_t

cnp.import_array()


cdef extern from *:
    """
    static inline int qd_parity64(unsigned long long x) {
        return __builtin_parityll(x);
    }
    """
    int qd_parity64(unsigned long long x) nogil


def lag_histogram(const int64_t[::1] t1, const uint8_t[::1] c1,
                  const int64_t[::1] t2, const uint8_t[::1] c2,
                  int64_t lo, int64_t hi, int64_t bin_width):
    """Histogram of ``t2[j] - t1[i]`` over ``[lo, hi)``.

    Returns an ``(nbins, 3)`` int64 array with columns: all pairs,
    same-basis agreeing pairs, same-basis disagreeing pairs. Channel codes
    above 3 never count as same-basis.
    """
    cdef Py_ssize_t n1 = t1.shape[0], n2 = t2.shape[0]
    cdef int64_t nbins = (hi - lo + bin_width - 1) // bin_width
    out = np.zeros((nbins, 3), dtype=np.int64)
    cdef int64_t[:, ::1] h = out
    cdef Py_ssize_t i, j, start = 0
    cdef int64_t d, b
    cdef uint8_t a, c
    with nogil:
        for i in range(n1):
            while start < n2 and t2[start] - t1[i] < lo:
                start += 1
            j = start
            a = c1[i]
            while j < n2:
                d = t2[j] - t1[i]
                if d >= hi:
                    break
                b = (d - lo) // bin_width
                h[b, 0] += 1
                c = c2[j]
                if a < 4 and c < 4 and (a >> 1) == (c >> 1):
                    if (a & 1) == (c & 1):
                        h[b, 1] += 1
                    else:
                        h[b, 2] += 1
                j += 1
    return out


def match_coincidences(const int64_t[::1] ta, const int64_t[::1] tb,
                       int64_t half_window):
    """Greedy nearest-neighbour pairing of two sorted streams.

    A pair is accepted when ``|tb[j] - ta[i]| <= half_window``; each click is
    used at most once.
    """
    cdef Py_ssize_t na = ta.shape[0], nb = tb.shape[0]
    cdef Py_ssize_t nmax = na if na < nb else nb
    ia_arr = np.empty(nmax, dtype=np.int64)
    ib_arr = np.empty(nmax, dtype=np.int64)
    cdef int64_t[::1] ia = ia_arr
    cdef int64_t[::1] ib = ib_arr
    cdef Py_ssize_t i = 0, j = 0, k = 0
    cdef int64_t d, dn
    with nogil:
        while i < na and j < nb:
            d = tb[j] - ta[i]
            if d < -half_window:
                j += 1
                continue
            if d > half_window:
                i += 1
                continue
            if d < 0:
                d = -d
            if i + 1 < na:
                dn = tb[j] - ta[i + 1]
                if dn < 0:
                    dn = -dn
                if dn < d:
                    i += 1
                    continue
            if j + 1 < nb:
                dn = tb[j + 1] - ta[i]
                if dn < 0:
                    dn = -dn
                if dn < d:
                    j += 1
                    continue
            ia[k] = i
            ib[k] = j
            k += 1
            i += 1
            j += 1
    return ia_arr[:k].copy(), ib_arr[:k].copy()


def dead_time_mask(const int64_t[::1] t, const uint8_t[::1] ch,
                   int64_t dead_time, int n_channels):
    """Non-paralysable dead time per channel on a time-sorted stream."""
    cdef Py_ssize_t n = t.shape[0], i
    keep_arr = np.zeros(n, dtype=np.bool_)
    cdef cnp.npy_bool[::1] keep = keep_arr
    last_arr = np.zeros(n_channels, dtype=np.int64)
    seen_arr = np.zeros(n_channels, dtype=np.uint8)
    cdef int64_t[::1] last = last_arr
    cdef uint8_t[::1] seen = seen_arr
    cdef uint8_t c
    with nogil:
        for i in range(n):
            c = ch[i]
            if seen[c] == 0 or t[i] - last[c] >= dead_time:
                keep[i] = 1
                last[c] = t[i]
                seen[c] = 1
    return keep_arr


cdef cnp.ndarray _pack_words(const uint8_t[::1] bits):
    cdef Py_ssize_t n = bits.shape[0], i
    words_arr = np.zeros(n // 64 + 2, dtype=np.uint64)
    cdef uint64_t[::1] w = words_arr
    for i in range(n):
        if bits[i]:
            w[i >> 6] |= (<uint64_t>1) << (i & 63)
    return words_arr


def toeplitz_hash(const uint8_t[::1] key, const uint8_t[::1] seed, Py_ssize_t m):
    """``T @ key`` over GF(2) with ``T[i, j] = seed[i - j + n - 1]``."""
    cdef Py_ssize_t n = key.shape[0]
    if seed.shape[0] != n + m - 1:
        raise ValueError("seed must hold len(key) + m - 1 bits")
    out_arr = np.zeros(m, dtype=np.uint8)
    if m == 0 or n == 0:
        return out_arr
    rev = np.ascontiguousarray(np.asarray(key)[::-1])
    cdef uint64_t[::1] kw = _pack_words(rev)
    cdef uint64_t[::1] sw = _pack_words(seed)
    cdef uint8_t[::1] out = out_arr
    cdef Py_ssize_t nwords = (n + 63) // 64
    cdef Py_ssize_t i, w, base, sh
    cdef uint64_t acc, win, tail
    # the last key word may be partial; mask the window to n bits
    if n % 64:
        tail = ((<uint64_t>1) << (n % 64)) - 1
    else:
        tail = ~(<uint64_t>0)
    with nogil:
        for i in range(m):
            base = i >> 6
            sh = i & 63
            acc = 0
            for w in range(nwords):
                if sh:
                    win = (sw[base + w] >> sh) | (sw[base + w + 1] << (64 - sh))
                else:
                    win = sw[base + w]
                if w == nwords - 1:
                    win &= tail
                acc ^= win & kw[w]
            out[i] = qd_parity64(acc)
    return out_arr
