"""Four-state analyzers, detectors and time taggers.

Channel codes are 0..3 for H, V, D, A. The basis of a code is ``code >> 1``
(0 rectilinear, 1 diagonal) and its key symbol is ``code & 1``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels
from .polarization import CHANNELS, jones

CLICK_DTYPE = np.dtype([("node", "u1"), ("channel", "u1"), ("timestamp", "<i8")])
ALICE, BOB = 0, 1


@dataclass(frozen=True)
class AnalyzerParams:
    efficiency: tuple = (1.0, 1.0, 1.0, 1.0)  # H, V, D, A
    dark_rate_hz: tuple = (0.0, 0.0, 0.0, 0.0)
    jitter_sigma_ps: float = 150.0
    dead_time_ps: float = 50_000.0

    def __post_init__(self):
        object.__setattr__(self, "efficiency", tuple(float(x) for x in self.efficiency))
        object.__setattr__(self, "dark_rate_hz", tuple(float(x) for x in self.dark_rate_hz))
        if len(self.efficiency) != 4 or len(self.dark_rate_hz) != 4:
            raise ValueError("need four detector entries (H, V, D, A)")
        if any(not 0.0 <= e <= 1.0 for e in self.efficiency):
            raise ValueError("detector efficiencies must lie in [0, 1]")
        if any(r < 0 for r in self.dark_rate_hz):
            raise ValueError("dark rates must be non-negative")
        if self.jitter_sigma_ps < 0 or self.dead_time_ps < 0:
            raise ValueError("jitter and dead time must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["efficiency"] = list(self.efficiency)
        d["dark_rate_hz"] = list(self.dark_rate_hz)
        return d


@dataclass(frozen=True)
class ClockParams:
    offset_ps: float = 0.0
    drift_ppm: float = 0.0

    def local_time(self, true_ps: np.ndarray) -> np.ndarray:
        """``(t + offset) * (1 + drift*1e-6)`` rounded to integer ps."""
        shifted = np.asarray(true_ps, dtype=np.int64) + np.int64(round(self.offset_ps))
        if self.drift_ppm == 0:
            return shifted
        return shifted + np.rint(shifted.astype(np.float64) * (self.drift_ppm * 1e-6)).astype(np.int64)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ClickEvent:
    channel: str
    timestamp: int
    node: str


@dataclass
class ClickStream:
    """Time-sorted clicks of one node."""

    timestamp: np.ndarray
    channel: np.ndarray
    node: int = ALICE
    # index of the originating pair, -1 for dark/background clicks (simulation only)
    pair: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.timestamp = np.asarray(self.timestamp, dtype=np.int64)
        self.channel = np.asarray(self.channel, dtype=np.uint8)
        if self.pair is None:
            self.pair = np.full(self.timestamp.size, -1, dtype=np.int64)

    def __len__(self) -> int:
        return int(self.timestamp.size)

    def events(self):
        name = "Alice" if self.node == ALICE else "Bob"
        for t, c in zip(self.timestamp.tolist(), self.channel.tolist()):
            yield ClickEvent(CHANNELS[c], t, name)

    def select(self, mask) -> "ClickStream":
        return ClickStream(self.timestamp[mask], self.channel[mask], self.node, self.pair[mask])

    def shifted(self, dt: int) -> "ClickStream":
        return ClickStream(self.timestamp + np.int64(dt), self.channel, self.node, self.pair)

    def to_records(self) -> np.ndarray:
        rec = np.empty(len(self), dtype=CLICK_DTYPE)
        rec["node"] = self.node
        rec["channel"] = self.channel
        rec["timestamp"] = self.timestamp
        return rec

    @staticmethod
    def merge(*streams: "ClickStream") -> "ClickStream":
        t = np.concatenate([s.timestamp for s in streams])
        c = np.concatenate([s.channel for s in streams])
        p = np.concatenate([s.pair for s in streams])
        order = np.argsort(t, kind="stable")
        return ClickStream(t[order], c[order], streams[0].node, p[order])


def write_click_dump(path, *streams: ClickStream) -> None:
    np.concatenate([s.to_records() for s in streams]).tofile(path)


def read_click_dump(path) -> dict:
    """Per-node click streams from a dump file, keyed by node id."""
    rec = np.fromfile(path, dtype=CLICK_DTYPE)
    out = {}
    for node in np.unique(rec["node"]):
        r = rec[rec["node"] == node]
        order = np.argsort(r["timestamp"], kind="stable")
        out[int(node)] = ClickStream(r["timestamp"][order], r["channel"][order], int(node))
    return out


# --- outcome sampling -------------------------------------------------------

def _amplitude_tables(wa: np.ndarray, wb: np.ndarray):
    """Amplitudes of ``W|HH>`` and ``W|VV>`` on each of the 16 H/V/D/A settings."""
    w = np.kron(wa, wb)
    u = np.empty((4, 4), dtype=complex)
    v = np.empty((4, 4), dtype=complex)
    for i, a in enumerate(CHANNELS):
        for j, b in enumerate(CHANNELS):
            k = np.kron(jones(a), jones(b)).conj()
            u[i, j] = k @ w[:, 0]
            v[i, j] = k @ w[:, 3]
    return u, v


def outcome_probabilities(phase: np.ndarray, wa: np.ndarray, wb: np.ndarray,
                          gamma: float = 1.0) -> np.ndarray:
    """``P(channel_a, channel_b)`` for pairs with dwell phases ``phase``.

    The pair state is ``(|HH> + exp(-i phase)|VV>)/sqrt(2)`` with coherence
    scaled by ``gamma``, sent through ``wa (x) wb``. Returns shape
    ``(n, 4, 4)``; each 2x2 basis block sums to the pair's survival
    probability (1 for unitary channels).
    """
    u, v = _amplitude_tables(wa, wb)
    base = 0.5 * (np.abs(u) ** 2 + np.abs(v) ** 2)
    cross = np.conj(u) * v
    e = np.exp(-1j * np.asarray(phase, dtype=float))
    return base[None] + gamma * np.real(e[:, None, None] * cross[None])


def sample_joint_outcome(probs_or_rho, rng: np.random.Generator, n: int | None = None,
                         kappa: float = 1.0):
    """Draw bases and outcomes for both nodes.

    ``probs_or_rho`` is either a 4x4 density matrix (all pairs share it; pass
    ``n``) or an ``(n, 4, 4)`` table from :func:`outcome_probabilities`. With
    probability ``1 - kappa`` a pair is replaced by white noise.
    Returns ``(basis_a, bit_a, basis_b, bit_b)`` as uint8 arrays.
    """
    arr = np.asarray(probs_or_rho)
    if arr.ndim == 2:
        if n is None:
            raise ValueError("n is required when sampling from a density matrix")
        rho = arr
        table = np.empty((4, 4))
        for i, a in enumerate(CHANNELS):
            for j, b in enumerate(CHANNELS):
                k = np.kron(jones(a), jones(b))
                table[i, j] = np.real(np.vdot(k, rho @ k))
        probs = np.broadcast_to(table, (n, 4, 4))
    else:
        probs = arr
        n = probs.shape[0]
    basis_a = rng.integers(0, 2, size=n).astype(np.uint8)
    basis_b = rng.integers(0, 2, size=n).astype(np.uint8)
    idx = np.arange(n)
    # the 2x2 block of the chosen basis pair, flattened to outcomes 00, 01, 10, 11
    p = np.stack([probs[idx, 2 * basis_a + i, 2 * basis_b + j]
                  for i in (0, 1) for j in (0, 1)], axis=1)
    p = np.clip(p, 0.0, None)
    p /= p.sum(axis=1, keepdims=True)
    cum = np.cumsum(p, axis=1)
    r = rng.random(n)
    outcome = (r[:, None] > cum[:, :3]).sum(axis=1)
    if kappa < 1.0:
        noisy = rng.random(n) >= kappa
        outcome = np.where(noisy, rng.integers(0, 4, size=n), outcome)
    bit_a = (outcome >> 1).astype(np.uint8)
    bit_b = (outcome & 1).astype(np.uint8)
    return basis_a, bit_a, basis_b, bit_b


# --- detectors --------------------------------------------------------------

def dark_counts(dark_rate_hz, duration_s: float, rng: np.random.Generator,
                start_ps: int = 0, node: int = ALICE) -> ClickStream:
    """Homogeneous Poisson background on each of the four detectors."""
    rates = np.broadcast_to(np.asarray(dark_rate_hz, dtype=float), (4,))
    if (rates < 0).any():
        raise ValueError("dark rates must be non-negative")
    span = duration_s * 1e12
    ts, cs = [], []
    for ch, r in enumerate(rates):
        k = rng.poisson(r * duration_s) if r > 0 else 0
        ts.append(start_ps + np.floor(rng.random(k) * span).astype(np.int64))
        cs.append(np.full(k, ch, dtype=np.uint8))
    t = np.concatenate(ts)
    c = np.concatenate(cs)
    order = np.argsort(t, kind="stable")
    return ClickStream(t[order], c[order], node)


def detect(arrival_ps: np.ndarray, channel: np.ndarray, analyzer: AnalyzerParams,
           clock: ClockParams, rng: np.random.Generator, node: int = ALICE,
           background: ClickStream | None = None, pair_index: np.ndarray | None = None,
           efficiency_scale: float = 1.0) -> ClickStream:
    """Turn photon arrivals into time-tagged clicks of one node.

    Efficiency thinning and jitter act on the photons, background clicks
    (already on the true time axis) are merged, dead time is applied per
    detector and the result is mapped onto the node's local clock.
    """
    arrival_ps = np.asarray(arrival_ps, dtype=np.int64)
    channel = np.asarray(channel, dtype=np.uint8)
    if pair_index is None:
        pair_index = np.arange(arrival_ps.size, dtype=np.int64)
    eff = np.asarray(analyzer.efficiency) * efficiency_scale
    keep = rng.random(arrival_ps.size) < eff[channel]
    t = arrival_ps[keep]
    c = channel[keep]
    p = np.asarray(pair_index, dtype=np.int64)[keep]
    if analyzer.jitter_sigma_ps > 0:
        t = t + np.rint(rng.normal(0.0, analyzer.jitter_sigma_ps, size=t.size)).astype(np.int64)
    stream = ClickStream(t, c, node, p)
    if background is not None and len(background):
        stream = ClickStream.merge(stream, ClickStream(background.timestamp, background.channel,
                                                       node, background.pair))
    else:
        order = np.argsort(stream.timestamp, kind="stable")
        stream = stream.select(order)
    if analyzer.dead_time_ps > 0 and len(stream):
        stream = stream.select(_kernels.dead_time_mask(stream.timestamp, stream.channel,
                                                       int(round(analyzer.dead_time_ps))))
    return ClickStream(clock.local_time(stream.timestamp), stream.channel, node, stream.pair)
