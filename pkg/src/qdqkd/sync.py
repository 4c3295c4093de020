"""Delay recovery, coincidence matching, g2 and tomography."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import _kernels
from .detection import ClickStream
from .polarization import STATES, check_density_matrix


class AnalysisError(Exception):
    """Base class for analysis failures (CLI exit code 4)."""


class NoPeak(AnalysisError):
    pass


class InsufficientData(AnalysisError):
    pass


class EmptySample(AnalysisError):
    pass


class SingularFrame(AnalysisError):
    pass


# --- delay ------------------------------------------------------------------

@dataclass(frozen=True)
class DelayEstimate:
    """``t_b = t_a + offset + drift * (t_a - ref_time)`` (all ps)."""

    offset: float
    drift: float = 0.0
    ref_time: int = 0
    score: float = 0.0

    @property
    def drift_ppm(self) -> float:
        return self.drift * 1e6

    def offset_at(self, t_a) -> np.ndarray | float:
        return self.offset + self.drift * (np.asarray(t_a, dtype=np.float64) - self.ref_time)

    def to_a_frame(self, t_b: np.ndarray) -> np.ndarray:
        """Map Bob timestamps onto Alice's time axis."""
        t_b = np.asarray(t_b, dtype=np.int64)
        # invert t_b = t_a (1 + drift) + offset - drift*ref, relative to ref to keep precision
        rel = (t_b - np.int64(self.ref_time)).astype(np.float64) - self.offset
        shift = rel / (1.0 + self.drift) - rel
        return t_b - np.int64(round(self.offset)) + np.rint(
            shift - (self.offset - round(self.offset))).astype(np.int64)


def _correlation_z(hist: np.ndarray) -> np.ndarray:
    agree, disagree = hist[:, 1].astype(float), hist[:, 2].astype(float)
    return (agree - disagree) / np.sqrt(np.maximum(agree + disagree, 1.0))


def _peak_threshold(z: np.ndarray, z_sigma: float) -> tuple[float, float]:
    """Noise floor and acceptance threshold for the largest score.

    Under the null each bin's score is ~N(0, 1); the extreme of ``n`` such
    bins sits near ``sqrt(2 ln n)``, so the 3-sigma margin is taken on top of
    that rather than on top of the median.
    """
    floor = float(np.median(z))
    mad = float(np.median(np.abs(z - floor))) * 1.4826
    sigma = max(mad, 1.0)
    return floor, floor + sigma * (z_sigma + math.sqrt(2.0 * math.log(max(z.size, 2))))


def _refine(ta, ca, tb, cb, center: float, coarse_bin: int, fine_bin: int) -> tuple[float, float]:
    lo = int(math.floor(center)) - 3 * coarse_bin
    hist = _kernels.lag_histogram(ta, ca, tb, cb, lo, lo + 6 * coarse_bin + fine_bin, fine_bin)
    w = (hist[:, 1] - hist[:, 2]).astype(float)
    if w.sum() <= 0:
        return center, 0.0
    lags = lo + fine_bin * (np.arange(w.size) + 0.5)
    smooth = np.convolve(w, np.ones(5), mode="same")
    k = int(np.argmax(smooth))
    span = max(2, int(round(1500 / fine_bin)))
    sl = slice(max(0, k - span), k + span + 1)
    ws = w[sl]
    if ws.sum() <= 0:
        return float(lags[k]), float(w.sum())
    return float(np.dot(ws, lags[sl]) / ws.sum()), float(ws.sum())


def _candidate_pairs(ta, ca, tb, cb, lo: float, hi: float):
    """All same-basis (a, b) click pairs with lag ``tb - ta`` in ``[lo, hi)``."""
    first = np.searchsorted(tb, ta + int(math.floor(lo)), side="left")
    last = np.searchsorted(tb, ta + int(math.ceil(hi)), side="left")
    counts = last - first
    ia = np.repeat(np.arange(ta.size), counts)
    ib = np.repeat(first - np.cumsum(counts) + counts, counts) + np.arange(counts.sum())
    same = (ca[ia] >> 1) == (cb[ib] >> 1)
    ia, ib = ia[same], ib[same]
    sign = np.where(ca[ia] == cb[ib], 1.0, -1.0)
    return ta[ia], (tb[ib] - ta[ia]).astype(np.float64), sign


def _line_search(t, lag, sign, t_ref: float, center: float, half: float, max_drift: float,
                 span: float, fine_bin: int) -> tuple[float, float, float]:
    """Best ``(offset_at_t_ref, drift, weight)`` for signed lag samples.

    Coarse-to-fine: at each level the bin shrinks tenfold and the drift grid
    is spaced so the residual smear across ``span`` stays below one bin.
    """
    dt = t.astype(np.float64) - t_ref
    d_center, d_range = 0.0, max_drift
    b = float(max(half, fine_bin))
    peak = center
    while True:
        kw = 5 if b <= fine_bin else 3
        kernel = np.ones(kw)
        step = b / span if span > 0 else 0.0
        n_d = int(math.ceil(d_range / step)) if step > 0 else 0
        drifts = d_center + np.linspace(-d_range, d_range, 2 * n_d + 1)
        lo = peak - 2.0 * max(half, 3 * b)
        nbins = int(math.ceil(4.0 * max(half, 3 * b) / b)) + 1
        best = (-np.inf, d_center, peak)
        for d in drifts:
            k = np.floor((lag - d * dt - lo) / b).astype(np.int64)
            ok = (k >= 0) & (k < nbins)
            w = np.bincount(k[ok], weights=sign[ok], minlength=nbins)
            smooth = np.convolve(w, kernel, mode="same")
            j = int(np.argmax(smooth))
            if smooth[j] > best[0]:
                sl = slice(max(j - kw // 2, 0), j + kw // 2 + 1)
                ws = np.clip(w[sl], 0.0, None)
                mid = lo + b * (np.arange(sl.start, sl.start + ws.size) + 0.5)
                best = (float(smooth[j]), float(d), float(np.dot(ws, mid) / max(ws.sum(), 1e-300)))
        _, d_center, peak = best
        if b <= fine_bin:
            break
        d_range = 3.0 * step
        half = 3 * b
        b = max(float(fine_bin), b / 10.0)
    resid = lag - d_center * dt
    sel = np.abs(resid - peak) <= 1500.0
    weight = float(sign[sel].sum())
    if weight <= 0:
        return float(peak), d_center, 0.0
    return float(np.dot(sign[sel], resid[sel]) / weight), d_center, weight


def find_delay(clicks_a: ClickStream, clicks_b: ClickStream, search_span: int = 50_000_000,
               coarse_bin: int = 10_000, fine_bin: int = 100, max_drift_ppm: float = 20.0,
               prior: float | None = None, z_sigma: float = 3.0,
               min_events: int = 5000) -> DelayEstimate:
    """Offset (and linear drift) between two click streams.

    Lags are scored by polarization correlation: same-basis coincidences
    that agree count +1, those that disagree -1. Coincidences between
    different pulses carry no correlation, so the 12.5 ns pulse comb does
    not produce false peaks. The search is centred on ``prior``, by default
    the difference of the first timestamps (the shutter-opening alignment).

    The coarse stage uses a leading stretch of Alice's stream holding at
    least ``min_events`` clicks, doubled while no peak stands out and the
    drift bound ``max_drift_ppm`` still smears the peak by at most half a
    coarse bin; past that point the bin is widened instead. Inside
    the coarse peak, offset and drift are fitted jointly on the signed lag
    samples. Later stretches, spaced geometrically, are searched with fine
    bins around the running linear prediction; a weighted line through all
    stretch estimates gives the final offset and drift.
    """
    ta, ca = clicks_a.timestamp, clicks_a.channel
    tb, cb = clicks_b.timestamp, clicks_b.channel
    if ta.size == 0 or tb.size == 0:
        raise InsufficientData("both click streams must be non-empty")
    max_drift = max_drift_ppm * 1e-6
    t0 = int(ta[0])
    t_end = int(ta[-1])
    if prior is None:
        prior = float(tb[0] - ta[0])
        # the first clicks need not belong to the same pair; cover a few click gaps
        gap = (float(tb[-1] - tb[0]) / max(tb.size - 1, 1))
        search_span = int(max(search_span, 20 * gap))
    tau = (coarse_bin / 2.0) / max_drift if max_drift > 0 else float(t_end - t0 + 1)
    n1 = max(int(np.searchsorted(ta, t0 + tau, side="right")), min(min_events, ta.size), 1)
    while True:
        # a longer stretch only helps while the drift smear stays below the coarse bin
        tau = max(float(ta[n1 - 1] - t0), 1.0)
        width = int(max(coarse_bin, math.ceil(2.0 * max_drift * tau)))
        lo = int(math.floor(prior)) - search_span
        nb = max(int(math.ceil(2 * search_span / width)), 1)
        hist = _kernels.lag_histogram(ta[:n1], ca[:n1], tb, cb, lo, lo + nb * width, width)
        z = _correlation_z(hist)
        k = int(np.argmax(z))
        _, thresh = _peak_threshold(z, z_sigma)
        if z[k] >= thresh:
            break
        if n1 >= ta.size or width > coarse_bin:
            raise NoPeak(f"best correlation score {z[k]:.2f} below threshold {thresh:.2f}")
        n1 = min(2 * n1, ta.size)
    score = float(z[k])
    center = lo + width * (k + 0.5)
    t_ref = float(np.mean(ta[:n1]))
    t, lag, sign = _candidate_pairs(ta[:n1], ca[:n1], tb, cb, center - 2 * width, center + 2 * width)
    off, drift, weight = _line_search(t, lag, sign, t_ref, center, width, max_drift, tau, fine_bin)
    points = [(t_ref, off, max(weight, 1.0))]
    model = DelayEstimate(off - drift * (t_ref - t0), drift, t0, score)

    # follow the drift along the stream
    seg_len = tau
    t_next = t0 + 2 * tau
    while t_next < t_end:
        i0 = int(np.searchsorted(ta, t_next, side="left"))
        i1 = int(np.searchsorted(ta, t_next + seg_len, side="right"))
        if i1 - i0 >= 2:
            seg_a, seg_c = ta[i0:i1], ca[i0:i1]
            ref = float(np.mean(seg_a))
            pred = float(model.offset_at(ref))
            # remove the predicted drift inside the stretch before histogramming
            seg_shift = np.rint(model.drift * (seg_a.astype(np.float64) - ref)).astype(np.int64)
            est, w = _refine(seg_a + seg_shift, seg_c, tb, cb, pred, coarse_bin, fine_bin)
            if w > 0:
                points.append((ref, est, w))
                x = np.array([p[0] for p in points]) - t0
                y = np.array([p[1] for p in points])
                wts = np.array([p[2] for p in points])
                slope, icpt = np.polyfit(x, y, 1, w=np.sqrt(wts))
                model = DelayEstimate(float(icpt), float(slope), t0, score)
        t_next = t_next * 2 - t0
        seg_len = min(seg_len * 2, float(t_end - t0))
    return model


# --- coincidences -----------------------------------------------------------

@dataclass
class Coincidences:
    """Matched click pairs, as index arrays into the two streams."""

    ia: np.ndarray
    ib: np.ndarray
    delta: np.ndarray  # residual after delay correction, ps

    def __len__(self) -> int:
        return int(self.ia.size)


def match_coincidences(clicks_a: ClickStream, clicks_b: ClickStream,
                       offset: float | DelayEstimate = 0.0, window: int = 1000) -> Coincidences:
    """Greedy nearest-neighbour pairing within ``|dt - offset| <= window/2``."""
    if isinstance(offset, DelayEstimate):
        tb = offset.to_a_frame(clicks_b.timestamp)
    else:
        tb = clicks_b.timestamp - np.int64(round(offset))
    ta = clicks_a.timestamp
    ia, ib = _kernels.match_coincidences(ta, tb, window // 2)
    return Coincidences(ia, ib, (tb[ib] - ta[ia]).astype(np.int64))


def accidental_rate(rate_a_hz: float, rate_b_hz: float, window_ps: float) -> float:
    """Coincidence rate between two independent Poisson streams."""
    return rate_a_hz * rate_b_hz * window_ps * 1e-12


# --- g2 ---------------------------------------------------------------------

def g2_peak_areas(arm1: np.ndarray, arm2: np.ndarray, rep_period_ps: float,
                  bin_ps: int = 1000, n_side: int = 10) -> np.ndarray:
    """Cross-arm coincidence counts in ``2*n_side + 1`` bins centred on ``k * rep_period_ps``.

    Areas of independent stretches of one stream may be summed before
    :func:`g2_from_areas`.
    """
    arm1 = np.asarray(arm1, dtype=np.int64)
    arm2 = np.asarray(arm2, dtype=np.int64)
    if arm1.size == 0 or arm2.size == 0:
        raise InsufficientData("empty arm")
    span = max(arm1[-1], arm2[-1]) - min(arm1[0], arm2[0])
    if span < 20 * rep_period_ps or n_side < 10:
        raise InsufficientData("need a stream of at least 20 repetition periods and 10 side peaks")
    dummy1 = np.full(arm1.size, 255, dtype=np.uint8)
    dummy2 = np.full(arm2.size, 255, dtype=np.uint8)
    areas = []
    half = bin_ps // 2
    for k in range(-n_side, n_side + 1):
        c = int(round(k * rep_period_ps))
        h = _kernels.lag_histogram(arm1, dummy1, arm2, dummy2, c - half, c - half + bin_ps, bin_ps)
        areas.append(int(h[:, 0].sum()))
    return np.array(areas, dtype=np.int64)


def g2_from_areas(areas) -> tuple[float, float]:
    """Zero-delay area over the mean side-peak area, with Poisson errors."""
    areas = np.asarray(areas, dtype=float)
    mid = areas.size // 2
    zero = areas[mid]
    side = np.delete(areas, mid)
    mean_side = side.mean()
    if mean_side <= 0:
        raise InsufficientData("no side-peak coincidences")
    g2 = zero / mean_side
    err = math.sqrt(zero + g2 ** 2 * side.sum() / side.size) / mean_side if zero > 0 else 1.0 / mean_side
    return float(g2), float(err)


def g2_autocorrelation(arm1: np.ndarray, arm2: np.ndarray, rep_period_ps: float,
                       bin_ps: int = 1000, n_side: int = 10) -> tuple[float, float]:
    """Zero-delay peak area over the mean of ``2*n_side`` side peaks.

    ``arm1``/``arm2`` are the click times at the two outputs of the
    Hanbury Brown-Twiss splitter. No background is subtracted. Returns
    ``(g2, stderr)`` with Poisson errors on the peak areas.
    """
    return g2_from_areas(g2_peak_areas(arm1, arm2, rep_period_ps, bin_ps, n_side))


def hbt_arms(stream: ClickStream) -> tuple[np.ndarray, np.ndarray]:
    """Rectilinear-arm and diagonal-arm clicks of one four-state analyzer."""
    rect = stream.channel < 2
    return stream.timestamp[rect], stream.timestamp[~rect]


# --- QBER -------------------------------------------------------------------

def qber_estimate(bits_a, bits_b) -> tuple[float, float]:
    """Disagreement fraction of same-basis bit pairs and its binomial stderr."""
    a = np.asarray(bits_a, dtype=np.uint8)
    b = np.asarray(bits_b, dtype=np.uint8)
    if a.size != b.size:
        raise ValueError("bit arrays differ in length")
    if a.size == 0:
        raise EmptySample("no bits to compare")
    q = float(np.count_nonzero(a != b)) / a.size
    return q, math.sqrt(q * (1.0 - q) / a.size)


# --- tomography -------------------------------------------------------------

_PAULI = [np.eye(2, dtype=complex), np.array([[0, 1], [1, 0]], dtype=complex),
          np.array([[0, -1j], [1j, 0]], dtype=complex), np.diag([1.0, -1.0]).astype(complex)]
_BASIS16 = [np.kron(p, q) for p in _PAULI for q in _PAULI]
_BASIS_OF = {"H": "Z", "V": "Z", "D": "X", "A": "X", "R": "Y", "L": "Y"}
_MEMBERS = {"Z": ("H", "V"), "X": ("D", "A"), "Y": ("R", "L")}


def _projector(a: str, b: str) -> np.ndarray:
    k = np.kron(STATES[a], STATES[b])
    return np.outer(k, k.conj())


def nearest_density_matrix(x: np.ndarray) -> np.ndarray:
    """Hermitian part, negative eigenvalues clipped, trace renormalised."""
    x = 0.5 * (x + x.conj().T)
    w, v = np.linalg.eigh(x)
    w = np.clip(w, 0.0, None)
    if w.sum() <= 0:
        raise SingularFrame("reconstruction has no positive part")
    w /= w.sum()
    return (v * w) @ v.conj().T


def tomography(counts: dict) -> np.ndarray:
    """Linear-inversion two-qubit state from projective coincidence counts.

    ``counts`` maps ``(setting_a, setting_b)`` with settings in
    H, V, D, A, R, L to counts. When every basis pair present is complete
    (all four outcomes), counts are turned into per-basis-pair frequencies;
    otherwise a single overall count scale is assumed. The frame must be
    informationally complete: 16 independent projectors, e.g. the
    H, V, D, R per-qubit set. H, V, D, A alone is not (it never sees the
    circular components) and raises :class:`SingularFrame`.
    """
    if not counts:
        raise SingularFrame("no settings")
    keys = list(counts)
    for a, b in keys:
        if a not in STATES or b not in STATES:
            raise ValueError(f"unknown setting {(a, b)!r}")
        if counts[(a, b)] < 0:
            raise ValueError("counts must be non-negative")
    groups: dict = {}
    for a, b in keys:
        groups.setdefault((_BASIS_OF[a], _BASIS_OF[b]), []).append((a, b))
    complete = all(len(g) == 4 for g in groups.values())
    values = []
    for a, b in keys:
        c = float(counts[(a, b)])
        if complete:
            tot = sum(float(counts[k]) for k in groups[(_BASIS_OF[a], _BASIS_OF[b])])
            c = c / tot if tot > 0 else 0.0
        values.append(c)
    design = np.array([[np.real(np.trace(_projector(a, b) @ s)) for s in _BASIS16] for a, b in keys])
    if np.linalg.matrix_rank(design, tol=1e-9) < 16:
        raise SingularFrame("settings do not span the two-qubit operator space")
    coef, *_ = np.linalg.lstsq(design, np.array(values), rcond=None)
    x = sum(c * s for c, s in zip(coef, _BASIS16))
    tr = np.trace(x).real
    if tr <= 0:
        raise SingularFrame("reconstructed trace is not positive")
    return nearest_density_matrix(x / tr)


def tomography_probabilities(rho: np.ndarray) -> dict:
    """Exact ``<ab|rho|ab>`` on all 36 settings."""
    return {(a, b): float(np.real(np.trace(_projector(a, b) @ rho))) for a in STATES for b in STATES}


def simulate_tomography_counts(rho: np.ndarray, n_pairs: int, rng: np.random.Generator) -> dict:
    """Coincidence counts with each pair measured in a random basis pair of Z, X, Y."""
    check_density_matrix(rho)
    probs = tomography_probabilities(rho)
    bases = list(_MEMBERS)
    per_pair = rng.multinomial(n_pairs, np.full(9, 1 / 9))
    counts = {}
    for (ba, bb), n in zip([(x, y) for x in bases for y in bases], per_pair):
        keys = [(a, b) for a in _MEMBERS[ba] for b in _MEMBERS[bb]]
        p = np.array([probs[k] for k in keys])
        p = np.clip(p, 0, None)
        for k, c in zip(keys, rng.multinomial(n, p / p.sum())):
            counts[k] = int(c)
    return counts


# --- drift tracking and reports ---------------------------------------------

class DelayTracker:
    """Online offset and drift tracking from timing residuals of a public sample.

    Each update takes the residuals ``delta`` of one stretch of stream time,
    matched with the current estimate in a window wide enough that the
    residual distribution is not truncated. Only a random ``fraction`` of
    them moves the estimate: a robust slope corrects the drift and the
    median of the detrended residuals corrects the offset.
    """

    max_points = 1500

    def __init__(self, estimate: DelayEstimate, fraction: float = 0.1, seed: int = 0):
        if not 0.0 < fraction <= 1.0:
            raise ValueError("fraction must lie in (0, 1]")
        self.estimate = estimate
        self.fraction = fraction
        self._rng = np.random.default_rng(seed)
        self.history: list[DelayEstimate] = [estimate]

    def update(self, t_a: np.ndarray, delta: np.ndarray) -> DelayEstimate:
        t_a = np.asarray(t_a, dtype=np.float64)
        delta = np.asarray(delta, dtype=np.float64)
        pick = np.flatnonzero(self._rng.random(delta.size) < self.fraction)
        if pick.size < 5:
            return self.estimate
        if pick.size > self.max_points:
            pick = np.sort(self._rng.choice(pick, self.max_points, replace=False))
        ref = float(np.mean(t_a[pick]))
        x = t_a[pick] - ref
        y = delta[pick]
        slope = 0.0
        if pick.size >= 20 and np.ptp(x) > 0:
            slope = float(stats.theilslopes(y, x)[0])
        shift = float(np.median(y - slope * x))
        e = self.estimate
        self.estimate = DelayEstimate(float(e.offset_at(ref)) + shift, e.drift + slope,
                                      int(round(ref)), e.score)
        self.history.append(self.estimate)
        return self.estimate


QBER_CSV_COLUMNS = ("t_s", "qber", "stderr", "raw_rate_bps")


def write_qber_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(QBER_CSV_COLUMNS)
        for r in rows:
            w.writerow([f"{r[0]:.3f}", f"{r[1]:.6f}", f"{r[2]:.6f}", f"{r[3]:.3f}"])
