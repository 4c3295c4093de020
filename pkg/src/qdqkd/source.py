"""Quantum-dot pair emission events and the SPDC comparison formulas."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from .polarization import kappa_from_g2

PAIR_DUMP_DTYPE = np.dtype([("pulse_index", "<u8"), ("emit_time_ps", "<u8"),
                            ("dwell_ps", "<u4"), ("x_emit_ps", "<u8")])


@dataclass(frozen=True)
class QdSourceParams:
    rep_rate_hz: float = 80e6
    epsilon_pair: float = 0.87
    s_nev: float = 390.0
    t1_xx_ns: float = 0.12
    t1_x_ns: float = 0.25
    g2_x: float = 0.017
    g2_xx: float = 0.025
    eta_extraction: float = 0.11

    def __post_init__(self):
        for name in ("epsilon_pair", "g2_x", "g2_xx", "eta_extraction"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {val}")
        for name in ("rep_rate_hz", "t1_xx_ns", "t1_x_ns"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.s_nev < 0:
            raise ValueError("s_nev must be non-negative")

    @property
    def period_ps(self) -> float:
        return 1e12 / self.rep_rate_hz

    @property
    def kappa(self) -> float:
        return kappa_from_g2(self.g2_x, self.g2_xx)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PairBatch:
    """Column store of emitted pairs; times in integer ps on the source clock."""

    pulse_index: np.ndarray
    emit_time: np.ndarray  # XX photon
    dwell_time: np.ndarray  # exciton dwell
    x_emit_time: np.ndarray

    def __len__(self) -> int:
        return int(self.pulse_index.size)

    @classmethod
    def empty(cls) -> "PairBatch":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), z.copy())

    @classmethod
    def concat(cls, batches) -> "PairBatch":
        batches = list(batches)
        if not batches:
            return cls.empty()
        return cls(*(np.concatenate([getattr(b, f) for b in batches])
                     for f in ("pulse_index", "emit_time", "dwell_time", "x_emit_time")))

    def take(self, idx) -> "PairBatch":
        return PairBatch(self.pulse_index[idx], self.emit_time[idx],
                         self.dwell_time[idx], self.x_emit_time[idx])

    def to_records(self) -> np.ndarray:
        rec = np.empty(len(self), dtype=PAIR_DUMP_DTYPE)
        rec["pulse_index"] = self.pulse_index
        rec["emit_time_ps"] = self.emit_time
        rec["dwell_ps"] = self.dwell_time
        rec["x_emit_ps"] = self.x_emit_time
        return rec

    @classmethod
    def from_records(cls, rec: np.ndarray) -> "PairBatch":
        return cls(rec["pulse_index"].astype(np.int64), rec["emit_time_ps"].astype(np.int64),
                   rec["dwell_ps"].astype(np.int64), rec["x_emit_ps"].astype(np.int64))


def write_pair_dump(path, batch: PairBatch) -> None:
    batch.to_records().tofile(path)


def read_pair_dump(path) -> PairBatch:
    return PairBatch.from_records(np.fromfile(path, dtype=PAIR_DUMP_DTYPE))


def _emission_pulses(p: float, first: int, stop: int, rng: np.random.Generator) -> np.ndarray:
    """Pulse indices in ``[first, stop)`` that emit, via geometric gaps."""
    if p <= 0.0 or stop <= first:
        return np.zeros(0, dtype=np.int64)
    if p >= 1.0:
        return np.arange(first, stop, dtype=np.int64)
    n_pulses = stop - first
    out = []
    pos = first - 1
    while True:
        mean = n_pulses * p
        size = int(mean + 6.0 * math.sqrt(mean + 1.0) + 16)
        gaps = rng.geometric(p, size=size)
        idx = pos + np.cumsum(gaps, dtype=np.int64)
        if idx[-1] >= stop:
            out.append(idx[idx < stop])
            break
        out.append(idx)
        pos = int(idx[-1])
        n_pulses = stop - pos - 1
    return np.concatenate(out)


def sample_pair_chunk(params: QdSourceParams, first_pulse: int, n_pulses: int,
                      rng: np.random.Generator, accept: float = 1.0) -> PairBatch:
    """Pairs emitted in a block of pulses.

    ``accept`` thins the stream independently of everything else; a pulse then
    yields a kept pair with probability ``epsilon_pair * accept``.
    """
    if not 0.0 <= accept <= 1.0:
        raise ValueError("accept must lie in [0, 1]")
    pulses = _emission_pulses(params.epsilon_pair * accept, first_pulse,
                              first_pulse + n_pulses, rng)
    n = pulses.size
    xx_delay = rng.exponential(params.t1_xx_ns * 1e3, size=n)
    dwell = np.rint(rng.exponential(params.t1_x_ns * 1e3, size=n)).astype(np.int64)
    # pulse times are exact integers for the usual MHz rates; rounding keeps it so
    pulse_t = np.rint(pulses * params.period_ps).astype(np.int64)
    emit = pulse_t + np.rint(xx_delay).astype(np.int64)
    return PairBatch(pulses, emit, dwell, emit + dwell)


def iter_pair_events(params: QdSourceParams, duration_s: float, seed: int,
                     chunk_pulses: int = 1 << 22, accept: float = 1.0) -> Iterator[PairBatch]:
    """Stream of pair batches covering ``duration_s``.

    Chunk ``k`` covers a fixed pulse range and draws from its own child of
    ``SeedSequence(seed)``, so the output does not depend on how the stream is
    consumed and chunks could be produced in parallel.
    """
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    total = int(round(duration_s * params.rep_rate_hz))
    root = np.random.SeedSequence(seed)
    n_chunks = (total + chunk_pulses - 1) // chunk_pulses
    for k, child in enumerate(root.spawn(n_chunks)):
        first = k * chunk_pulses
        yield sample_pair_chunk(params, first, min(chunk_pulses, total - first),
                                np.random.default_rng(child), accept)


def sample_pair_events(params: QdSourceParams, duration_s: float, seed: int,
                       accept: float = 1.0, chunk_pulses: int = 1 << 22) -> PairBatch:
    return PairBatch.concat(iter_pair_events(params, duration_s, seed, chunk_pulses, accept))


def max_pump_rate(t1_xx_ns: float, t1_x_ns: float, relax_multiples: float = 4.0) -> float:
    """Highest repetition rate (Hz) leaving the dot time to relax between pulses."""
    if t1_xx_ns <= 0 or t1_x_ns <= 0 or relax_multiples <= 0:
        raise ValueError("lifetimes and relax_multiples must be positive")
    return 1.0 / (relax_multiples * (t1_xx_ns + t1_x_ns) * 1e-9)


def spdc_g2(epsilon_spdc: float) -> float:
    """Zero-delay autocorrelation of a Poissonian pair source at pair probability ``epsilon_spdc``."""
    if not 0.0 <= epsilon_spdc <= 1.0:
        raise ValueError("epsilon_spdc must lie in [0, 1]")
    return float(epsilon_spdc)


def source_comparison(qd: QdSourceParams, epsilon_spdc: float) -> dict:
    """Pair probability, g2(0) and multi-pair QBER floor for QD vs SPDC."""
    g2_spdc = spdc_g2(epsilon_spdc)
    kappa_spdc = kappa_from_g2(g2_spdc, g2_spdc)
    g2_qd = 0.5 * (qd.g2_x + qd.g2_xx)
    return {
        "qd": {
            "pair_probability": qd.epsilon_pair,
            "g2_zero": g2_qd,
            "kappa": qd.kappa,
            "qber_floor": (1.0 - qd.kappa) / 4.0,
            "pair_rate_hz": qd.rep_rate_hz * qd.epsilon_pair,
        },
        "spdc": {
            "pair_probability": epsilon_spdc,
            "g2_zero": g2_spdc,
            "kappa": kappa_spdc,
            "qber_floor": (1.0 - kappa_spdc) / 4.0,
            "pair_rate_hz": qd.rep_rate_hz * epsilon_spdc,
        },
        "max_pump_rate_hz": max_pump_rate(qd.t1_xx_ns, qd.t1_x_ns),
    }
