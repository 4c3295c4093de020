"""Scenario configuration, end-to-end simulation and the analytic rate budget.

A run is cut into segments of ``segment_s`` simulated seconds. Each segment
goes source -> fibers -> analyzers -> time tags, is aligned with the running
delay estimate, matched into coincidences and distilled by one protocol
session between two threads. Photon pairs are pre-thinned: only pairs with at
least one photon that could reach a detector are generated at all.
"""
from __future__ import annotations

import dataclasses
import functools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy import optimize, signal, stats

from .channel import FiberParams, apply_channel, drift_rotation
from .controller import (ExactProvider, PcAngles, SampledProvider, SimplexOptions, nelder_mead,
                         optimize_controller, sobol_starts)
from .detection import ALICE, BOB, AnalyzerParams, ClickStream, ClockParams, dark_counts, detect
from .detection import outcome_probabilities, sample_joint_outcome
from .polarization import (HBAR_NEV_NS, I2, mix_with_white_noise, model_state, qber_from_rho,
                           sifted_error_rate, su2_from_axis_angle)
from .protocol.postprocess import binary_entropy, pa_length
from .protocol.session import NodeFeed, SessionConfig, run_pair
from .source import QdSourceParams, sample_pair_chunk
from .sync import DelayTracker, find_delay, match_coincidences, write_qber_csv

CHUNK_PULSES = 1 << 22


class ConfigError(ValueError):
    """Invalid scenario configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class ScenarioAborted(RuntimeError):
    """A downstream stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException, segment: int | None = None):
        where = f" (segment {segment})" if segment is not None else ""
        super().__init__(f"{stage}{where}: {cause}")
        self.stage = stage
        self.cause = cause
        self.segment = segment


# --- configuration ----------------------------------------------------------

@dataclass(frozen=True)
class FiberSpec:
    length_km: float = 0.0
    attenuation_db_per_km: float = 3.0
    dgd_ps_per_sqrt_km: float = 0.5
    drift_rad_per_s: float = 0.0
    pdl_db: float = 0.0
    rotation_axis: tuple = (0.0, 0.0, 1.0)
    rotation_angle_rad: float = 0.0

    def __post_init__(self):
        axis = tuple(float(x) for x in self.rotation_axis)
        if len(axis) != 3 or math.fsum(x * x for x in axis) <= 0:
            raise ValueError("rotation_axis must be a non-zero 3-vector")
        norm = math.sqrt(math.fsum(x * x for x in axis))
        object.__setattr__(self, "rotation_axis", tuple(x / norm for x in axis))
        self.to_params()

    def rotation(self) -> np.ndarray:
        return su2_from_axis_angle(self.rotation_axis, self.rotation_angle_rad)

    def to_params(self, rotation: np.ndarray | None = None) -> FiberParams:
        return FiberParams(self.length_km, self.attenuation_db_per_km,
                           self.rotation() if rotation is None else rotation,
                           self.dgd_ps_per_sqrt_km, self.drift_rad_per_s, self.pdl_db)


@dataclass(frozen=True)
class PcSpec:
    mode: str = "optimize"  # optimize | fixed | off
    angles_rad: tuple = (0.0, 0.0, 0.0)
    samples_per_eval: int = 100_000
    restarts: int = 3
    threshold: float = 0.03

    def __post_init__(self):
        if self.mode not in ("optimize", "fixed", "off"):
            raise ValueError("mode must be optimize, fixed or off")
        PcAngles(tuple(self.angles_rad))
        if self.samples_per_eval < 1 or self.restarts < 1:
            raise ValueError("samples_per_eval and restarts must be positive")
        if not 0 < self.threshold < 0.5:
            raise ValueError("threshold must lie in (0, 0.5)")


@dataclass(frozen=True)
class ProtocolSpec:
    qber_abort: float = 0.11
    qber_warn: float = 0.07
    gate_z: float = 3.0
    ec_passes: int = 4
    safety_margin_bits: int = 64
    batch_size: int = 4096
    transport: str = "pipe"  # pipe | socket
    tracker_fraction: float = 0.1

    def __post_init__(self):
        if self.transport not in ("pipe", "socket"):
            raise ValueError("transport must be pipe or socket")
        if not 0 < self.tracker_fraction <= 1:
            raise ValueError("tracker_fraction must lie in (0, 1]")
        SessionConfig(qber_abort=self.qber_abort, qber_warn=self.qber_warn, gate_z=self.gate_z,
                      ec_passes=self.ec_passes, safety_margin=self.safety_margin_bits,
                      batch_size=self.batch_size)


@dataclass(frozen=True)
class SeedSpec:
    physics: int = 1
    protocol: int = 2

    def __post_init__(self):
        if self.physics < 0 or self.protocol < 0:
            raise ValueError("seeds must be non-negative integers")


@dataclass(frozen=True)
class ScenarioConfig:
    source: QdSourceParams = field(default_factory=QdSourceParams)
    fiber_a: FiberSpec = field(default_factory=lambda: FiberSpec(length_km=0.01))
    fiber_b: FiberSpec = field(default_factory=lambda: FiberSpec(length_km=0.35))
    analyzer_a: AnalyzerParams = field(default_factory=AnalyzerParams)
    analyzer_b: AnalyzerParams = field(default_factory=AnalyzerParams)
    clock_a: ClockParams = field(default_factory=ClockParams)
    clock_b: ClockParams = field(default_factory=ClockParams)
    coupling_efficiency_a: float = 1.0
    coupling_efficiency_b: float = 1.0
    t2_ps: float = 500.0
    window_ps: int = 1000
    # residuals for delay tracking are taken in a wider, untruncated window
    track_window_ps: int = 4000
    sacrifice_fraction: float = 0.10
    duration_s: float = 60.0
    segment_s: float = 10.0
    sync_preamble_s: float = 2.0
    # Rb-referenced time taggers: relative clock drift far below 1 ppm
    sync_max_drift_ppm: float = 0.001
    pc: PcSpec = field(default_factory=PcSpec)
    protocol: ProtocolSpec = field(default_factory=ProtocolSpec)
    seeds: SeedSpec = field(default_factory=SeedSpec)

    def __post_init__(self):
        for name in ("coupling_efficiency_a", "coupling_efficiency_b"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.t2_ps <= 0 or self.window_ps <= 0:
            raise ValueError("t2_ps and window_ps must be positive")
        if self.track_window_ps < self.window_ps:
            raise ValueError("track_window_ps must be at least window_ps")
        if not 0.0 < self.sacrifice_fraction < 1.0:
            raise ValueError("sacrifice_fraction must lie in (0, 1)")
        if min(self.duration_s, self.segment_s, self.sync_preamble_s, self.sync_max_drift_ppm) <= 0:
            raise ValueError("durations must be positive")

    def session_config(self, segment: int) -> SessionConfig:
        p = self.protocol
        return SessionConfig(protocol_seed=self.seeds.protocol, session_id=segment + 1,
                             sacrifice_fraction=self.sacrifice_fraction, qber_abort=p.qber_abort,
                             qber_warn=p.qber_warn, gate_z=p.gate_z, ec_passes=p.ec_passes,
                             safety_margin=p.safety_margin_bits, batch_size=p.batch_size)

    def to_dict(self) -> dict:
        return _to_jsonable(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        return _build(cls, data, "")

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_jsonable(x) for x in obj]
    return obj


_NESTED = {"source": QdSourceParams, "fiber_a": FiberSpec, "fiber_b": FiberSpec,
           "analyzer_a": AnalyzerParams, "analyzer_b": AnalyzerParams, "clock_a": ClockParams,
           "clock_b": ClockParams, "pc": PcSpec, "protocol": ProtocolSpec, "seeds": SeedSpec}


def _coerce(value: Any, default: Any, path: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, "expected true/false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise ConfigError(path, "expected an integer")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigError(path, "expected a finite number")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list) or len(value) != len(default):
            raise ConfigError(path, f"expected a list of {len(default)} numbers")
        return tuple(_coerce(v, d, f"{path}[{i}]") for i, (v, d) in enumerate(zip(value, default)))
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, "expected a string")
        return value
    return value


def _build(cls, data: Any, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(prefix.rstrip("."), "expected an object")
    proto = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{prefix}{key}", "unknown field")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        path = f"{prefix}{f.name}"
        if cls is ScenarioConfig and f.name in _NESTED:
            kwargs[f.name] = _build(_NESTED[f.name], data[f.name], path + ".")
        else:
            kwargs[f.name] = _coerce(data[f.name], getattr(proto, f.name), path)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(prefix.rstrip("."), str(exc)) from exc


def load_config(path) -> ScenarioConfig:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON in {path}: {exc}") from exc
    return ScenarioConfig.from_dict(data)


def save_config(config: ScenarioConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n")


# --- physics helpers --------------------------------------------------------

def arm_transmission(cfg: ScenarioConfig, node: int) -> float:
    """Probability that a photon reaches the analyzer input."""
    fiber, coupling = ((cfg.fiber_a, cfg.coupling_efficiency_a) if node == ALICE
                       else (cfg.fiber_b, cfg.coupling_efficiency_b))
    return cfg.source.eta_extraction * coupling * fiber.to_params().transmission


def source_state(cfg: ScenarioConfig) -> np.ndarray:
    s = cfg.source
    return model_state(s.s_nev, s.t1_x_ns, s.g2_x, s.g2_xx)


def pc_matrix(cfg: ScenarioConfig, angles: PcAngles | None) -> np.ndarray:
    if cfg.pc.mode == "off" or angles is None:
        return I2.copy()
    return angles.unitary()


def choose_pc_angles(cfg: ScenarioConfig, fiber_a: FiberParams | None = None,
                     fiber_b: FiberParams | None = None, exact: bool = False):
    """Controller setting for the run.

    ``fixed`` returns the configured angles. ``optimize`` runs the sampled
    search against the channel's pair statistics, or with ``exact`` the
    noiseless oracle used by :func:`expected_rates`.
    Returns ``(angles, info)``.
    """
    if cfg.pc.mode == "off":
        return None, {}
    if cfg.pc.mode == "fixed":
        return PcAngles(tuple(cfg.pc.angles_rad)), {}
    fa = fiber_a or cfg.fiber_a.to_params()
    fb = fiber_b or cfg.fiber_b.to_params()
    gamma = fa.coherence_factor(cfg.t2_ps) * fb.coherence_factor(cfg.t2_ps)
    rho = source_state(cfg)
    rho = rho.copy()
    rho[0, 3] *= gamma
    rho[3, 0] *= gamma
    if exact:
        prov = ExactProvider(rho, fa.jones(), fb.jones())
        best = None
        for start in sobol_starts(8, seed=cfg.seeds.physics):
            res = nelder_mead(lambda th: qber_from_rho(prov.state(th)), start,
                              SimplexOptions(initial_step=0.6, tol_f=1e-15, tol_x=1e-10, max_evals=4000))
            if best is None or res.fun < best.fun:
                best = res
        return PcAngles(tuple(best.x)), {"qber_from_rho": best.fun}
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seeds.physics, 0x9C]))
    prov = SampledProvider(rho, fa.jones(), fb.jones(), cfg.pc.samples_per_eval, rng)
    res = optimize_controller(prov, restarts=cfg.pc.restarts, threshold=cfg.pc.threshold,
                              seed=cfg.seeds.physics)
    return res.angles, {"loss": res.loss, "qber_estimate": res.qber, "evals": res.evals}


# --- simulation -------------------------------------------------------------

@dataclass
class SegmentClicks:
    alice: ClickStream
    bob: ClickStream
    t_start_ps: int
    t_stop_ps: int


def _rel_analyzer(an: AnalyzerParams) -> tuple[AnalyzerParams, float]:
    top = max(an.efficiency)
    rel = tuple(e / top for e in an.efficiency) if top > 0 else an.efficiency
    return dataclasses.replace(an, efficiency=rel), top


def simulate_segment(cfg: ScenarioConfig, segment: int, fiber_a: FiberParams, fiber_b: FiberParams,
                     pc: np.ndarray, n_pulses: int | None = None) -> SegmentClicks:
    """Click streams of both nodes for one segment, on their local clocks."""
    src = cfg.source
    seg_pulses = int(round(cfg.segment_s * src.rep_rate_hz))
    first = segment * seg_pulses
    if n_pulses is None:
        n_pulses = seg_pulses
    an_a, top_a = _rel_analyzer(cfg.analyzer_a)
    an_b, top_b = _rel_analyzer(cfg.analyzer_b)
    pa = arm_transmission(cfg, ALICE) * top_a
    pb = arm_transmission(cfg, BOB) * top_b
    p_any = 1.0 - (1.0 - pa) * (1.0 - pb)
    wa, wb = fiber_a.jones(), pc @ fiber_b.jones()
    gamma = fiber_a.coherence_factor(cfg.t2_ps) * fiber_b.coherence_factor(cfg.t2_ps)
    phase_per_ps = src.s_nev * 1e-3 / HBAR_NEV_NS
    delay_a, delay_b = int(round(fiber_a.delay_ps)), int(round(fiber_b.delay_ps))
    t_a, c_a, i_a, t_b, c_b, i_b = [], [], [], [], [], []
    n_chunks = max(1, -(-n_pulses // CHUNK_PULSES))
    for k in range(n_chunks):
        lo = k * CHUNK_PULSES
        count = min(CHUNK_PULSES, n_pulses - lo)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seeds.physics, segment, k, 0x5E]))
        pairs = sample_pair_chunk(src, first + lo, count, rng, accept=p_any)
        n = len(pairs)
        if n == 0:
            continue
        # given at least one photon survives: (A only, B only, both)
        u = rng.random(n) * p_any
        a_only = pa * (1.0 - pb)
        b_only = (1.0 - pa) * pb
        alive_a = (u < a_only) | (u >= a_only + b_only)
        alive_b = u >= a_only
        probs = outcome_probabilities(pairs.dwell_time * phase_per_ps, wa, wb, gamma)
        basis_a, bit_a, basis_b, bit_b = sample_joint_outcome(probs, rng, kappa=src.kappa)
        t_a.append(pairs.x_emit_time[alive_a] + delay_a)
        c_a.append((2 * basis_a + bit_a)[alive_a].astype(np.uint8))
        i_a.append(pairs.pulse_index[alive_a])
        t_b.append(pairs.emit_time[alive_b] + delay_b)
        c_b.append((2 * basis_b + bit_b)[alive_b].astype(np.uint8))
        i_b.append(pairs.pulse_index[alive_b])
    period = src.period_ps
    t0 = int(round(first * period))
    t1 = int(round((first + n_pulses) * period))
    dur = (t1 - t0) * 1e-12
    cat = lambda xs, dt: np.concatenate(xs) if xs else np.zeros(0, dt)  # noqa: E731
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seeds.physics, segment, 0xDE7]))
    streams = []
    for node, an, clock, t, c, i in ((ALICE, an_a, cfg.clock_a, t_a, c_a, i_a),
                                     (BOB, an_b, cfg.clock_b, t_b, c_b, i_b)):
        bg = dark_counts(an.dark_rate_hz, dur, rng, start_ps=t0, node=node)
        bg.timestamp = bg.timestamp + (delay_a if node == ALICE else delay_b)
        streams.append(detect(cat(t, np.int64), cat(c, np.uint8), an, clock, rng, node=node,
                              background=bg, pair_index=cat(i, np.int64)))
    return SegmentClicks(streams[0], streams[1], t0, t1)


@dataclass
class SegmentResult:
    index: int
    t_end_s: float
    coincidences: int
    true_coincidences: int
    sifted_disagreement: float
    sifted_pairs: int
    qber: float
    qber_stderr: float
    key_bits: int
    parity_bits: int
    final_bits: int
    delay_offset_ps: float


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    segments: list
    key_alice: np.ndarray
    key_bob: np.ndarray
    transcript_alice: bytes
    transcript_bob: bytes
    pc_angles: PcAngles | None
    pc_info: dict
    report: dict

    def csv_rows(self):
        rows, t0 = [], 0.0
        for s in self.segments:  # the last segment may be short
            rows.append((s.t_end_s, s.qber, s.qber_stderr, s.coincidences / (s.t_end_s - t0)))
            t0 = s.t_end_s
        return rows


def _ledger_totals(reports) -> dict:
    keys = ("sacrificed_bits", "parity_bits_disclosed", "confirm_bits", "pa_bound_l")
    out = {k: int(sum(r.ledger.to_dict()[k] for r in reports)) for k in keys}
    out["safety_margin_bits"] = int(sum(r.ledger.safety_margin for r in reports))
    return out


def run_scenario(config: ScenarioConfig, out_dir=None) -> ScenarioResult:
    """Simulate, align, distil and (optionally) write the report bundle.

    Raises
    ------
    ScenarioAborted
        When synchronisation or a protocol session fails.
    """
    cfg = config
    rng_env = np.random.default_rng(np.random.SeedSequence([cfg.seeds.physics, 0xF1B]))
    fa, fb = cfg.fiber_a.to_params(), cfg.fiber_b.to_params()
    try:
        angles, pc_info = choose_pc_angles(cfg, fa, fb)
    except Exception as exc:  # NotConverged and friends
        raise ScenarioAborted("pc-optimize", exc) from exc
    pc = pc_matrix(cfg, angles)
    seg_pulses = int(round(cfg.segment_s * cfg.source.rep_rate_hz))
    total_pulses = int(round(cfg.duration_s * cfg.source.rep_rate_hz))
    n_seg = max(1, -(-total_pulses // seg_pulses))
    tracker = None
    segments, rep_a, rep_b = [], [], []
    keys_a, keys_b, tr_a, tr_b = [], [], [], []
    for s in range(n_seg):
        if s:
            fa = dataclasses.replace(fa, rotation=drift_rotation(fa.rotation, cfg.segment_s,
                                                                 fa.drift_rad_per_s, rng_env))
            fb = dataclasses.replace(fb, rotation=drift_rotation(fb.rotation, cfg.segment_s,
                                                                 fb.drift_rad_per_s, rng_env))
        n_p = min(seg_pulses, total_pulses - s * seg_pulses)
        clicks = simulate_segment(cfg, s, fa, fb, pc, n_p)
        a, b = clicks.alice, clicks.bob
        if tracker is None:
            try:
                pre = int(cfg.sync_preamble_s * 1e12)
                est = find_delay(a.select(a.timestamp < a.timestamp[0] + pre) if len(a) else a,
                                 b.select(b.timestamp < b.timestamp[0] + pre) if len(b) else b,
                                 max_drift_ppm=cfg.sync_max_drift_ppm)
            except Exception as exc:
                raise ScenarioAborted("sync", exc, s) from exc
            tracker = DelayTracker(est, cfg.protocol.tracker_fraction, seed=cfg.seeds.physics)
        wide = match_coincidences(a, b, tracker.estimate, cfg.track_window_ps)
        tracker.update(a.timestamp[wide.ia], wide.delta)
        offset_used = float(tracker.estimate.offset)
        co = match_coincidences(a, b, tracker.estimate, cfg.window_ps)
        ch_a, ch_b = a.channel[co.ia], b.channel[co.ib]
        same = (ch_a >> 1) == (ch_b >> 1)
        disagree = float(np.mean((ch_a[same] & 1) != (ch_b[same] & 1))) if same.any() else 0.0
        true_co = int(np.count_nonzero((a.pair[co.ia] == b.pair[co.ib]) & (a.pair[co.ia] >= 0)))
        dur = n_p / cfg.source.rep_rate_hz
        feed_a = NodeFeed(ch_a >> 1, ch_a & 1, dur)
        feed_b = NodeFeed(ch_b >> 1, ch_b & 1, dur)
        out = run_pair(feed_a, feed_b, cfg.session_config(s), cfg.protocol.transport)
        tr_a.append(out.transcript_alice)
        tr_b.append(out.transcript_bob)
        if not out.ok:
            raise ScenarioAborted("protocol", out.alice_error or out.bob_error, s)
        ra, rb = out.alice, out.bob
        rep_a.append(ra)
        rep_b.append(rb)
        keys_a.append(ra.key)
        keys_b.append(rb.key)
        t_end = (s * seg_pulses + n_p) / cfg.source.rep_rate_hz
        segments.append(SegmentResult(s, t_end, len(co), true_co, disagree, int(same.sum()),
                                      ra.qber, ra.qber_stderr, ra.ec_input_bits, ra.parity_bits,
                                      ra.final_bits, offset_used))
    key_a = np.concatenate(keys_a) if keys_a else np.zeros(0, np.uint8)
    key_b = np.concatenate(keys_b) if keys_b else np.zeros(0, np.uint8)
    duration = total_pulses / cfg.source.rep_rate_hz
    n_co = sum(x.coincidences for x in segments)
    n_sifted = sum(r.n_sifted for r in rep_a)
    n_sac = sum(r.n_sacrificed for r in rep_a)
    n_err = sum(round(r.qber * r.n_sacrificed) for r in rep_a)
    n_same = sum(x.sifted_pairs for x in segments)
    sim_err = sum(x.sifted_disagreement * x.sifted_pairs for x in segments)
    report = {
        "duration_s": duration,
        "raw_rate_bps": n_co / duration,
        "sifted_rate_bps": n_sifted / duration,
        "key_rate_bps": (n_sifted - n_sac) / duration,
        "net_rate_bps": int(key_a.size) / duration,
        "qber_mean": n_err / n_sac if n_sac else 0.0,
        "qber_mean_stderr": math.sqrt(max(n_err, 1) * 1.0) / n_sac if n_sac else 0.0,
        "qber_all_sifted": sim_err / n_same if n_same else 0.0,
        "qber_series_ref": "qber.csv",
        "coincidences": n_co,
        "true_coincidences": sum(x.true_coincidences for x in segments),
        "sifted_bits": n_sifted,
        "final_key_bits": int(key_a.size),
        "keys_identical": bool(np.array_equal(key_a, key_b)),
        "ledger": _ledger_totals(rep_a),
        "segments": len(segments),
        "pc_angles_rad": list(angles.theta) if angles is not None else None,
        "pc": pc_info,
        "delay_offset_ps": float(tracker.estimate.offset) if tracker else None,
        "delay_drift_ppm": float(tracker.estimate.drift_ppm) if tracker else None,
    }
    result = ScenarioResult(cfg, segments, key_a, key_b, b"".join(tr_a), b"".join(tr_b),
                            angles, pc_info, report)
    if out_dir is not None:
        write_bundle(result, out_dir)
    return result


def write_bundle(result: ScenarioResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_qber_csv(out / "qber.csv", result.csv_rows())
    (out / "key_alice.bin").write_bytes(np.packbits(result.key_alice).tobytes())
    (out / "key_bob.bin").write_bytes(np.packbits(result.key_bob).tobytes())
    (out / "transcript_alice.bin").write_bytes(result.transcript_alice)
    (out / "transcript_bob.bin").write_bytes(result.transcript_bob)
    (out / "report.json").write_text(json.dumps(result.report, indent=2, sort_keys=True) + "\n")


# --- analytic budget --------------------------------------------------------

def _jitter_sigma(cfg: ScenarioConfig) -> float:
    return math.hypot(cfg.analyzer_a.jitter_sigma_ps, cfg.analyzer_b.jitter_sigma_ps)


def window_statistics(cfg: ScenarioConfig, center: float | None = None) -> dict:
    """Capture probability and mean FSS phase factor of windowed coincidences.

    The Bob-minus-Alice arrival difference of a pair is ``d = -dwell + J``
    (exponential dwell, Gaussian jitter of both detectors), so ``-d`` is
    exponentially modified Gaussian. ``center`` defaults to the fixed point
    of a median tracker: the median of the differences inside the tracking
    window centred on it.
    """
    return dict(_window_statistics(cfg.source.t1_x_ns * 1e3, _jitter_sigma(cfg), cfg.window_ps / 2.0,
                                   cfg.source.s_nev, center, cfg.track_window_ps / 2.0))


@functools.lru_cache(maxsize=64)
def _window_statistics(t1: float, sigma: float, half: float, s_nev: float, center: float | None,
                       track_half: float):
    sigma = max(sigma, 1e-3)
    w = s_nev * 1e-3 / HBAR_NEV_NS
    x = stats.exponnorm(t1 / sigma, loc=0.0, scale=sigma)  # law of -d

    def mass(lo, hi):  # P(lo <= d <= hi)
        return x.cdf(-lo) - x.cdf(-hi)

    if center is None:
        center = -float(x.median())
        for _ in range(200):
            lo, hi = center - track_half, center + track_half
            new = -float(x.ppf(x.cdf(-hi) + mass(lo, hi) / 2.0))
            if abs(new - center) < 1e-3:
                break
            center = new
    lo, hi = center - half, center + half
    tau = np.linspace(0.0, 50.0 * t1 + 10.0 * sigma + abs(center) + half, 200_001)
    inside = stats.norm.cdf((hi + tau) / sigma) - stats.norm.cdf((lo + tau) / sigma)
    weight = np.exp(-tau / t1) / t1 * inside
    cap = float(np.trapezoid(weight, tau))
    phasor = complex(np.trapezoid(weight * np.exp(-1j * w * tau), tau)) / cap
    return {"center_ps": center, "capture": float(mass(lo, hi)), "coherence": phasor}


def _signal_pair_capture(cfg: ScenarioConfig, node: int) -> float:
    """P(two signal clicks of one node from different pulses differ by < bin/2 beyond k*T)."""
    an = cfg.analyzer_a if node == ALICE else cfg.analyzer_b
    s = cfg.source
    return _pair_capture(s.t1_xx_ns * 1e3, s.t1_x_ns * 1e3 if node == ALICE else 0.0,
                         math.sqrt(2.0) * an.jitter_sigma_ps)


@functools.lru_cache(maxsize=64)
def _pair_capture(t_xx: float, t_x: float, sig: float) -> float:
    grid = np.arange(-40_000, 40_001, 1.0)
    lap = lambda t: np.exp(-np.abs(grid) / t) / (2 * t)  # noqa: E731
    dens = lap(t_xx)
    if t_x > 0:
        dens = signal.fftconvolve(dens, lap(t_x), mode="same")
    if sig > 0:
        dens = signal.fftconvolve(dens, stats.norm.pdf(grid, scale=sig), mode="same")
    dens /= dens.sum()
    return float(dens[np.abs(grid) <= 500.0].sum())


def expected_rates(cfg: ScenarioConfig, pc_angles: PcAngles | None = None,
                   ec_efficiency: float = 1.2) -> dict:
    """Closed-form rates and QBER used as the oracle for the simulation."""
    src = cfg.source
    r_pair = src.rep_rate_hz * src.epsilon_pair
    out = {}
    eta, sig, dark, live = {}, {}, {}, {}
    for node, an in ((ALICE, cfg.analyzer_a), (BOB, cfg.analyzer_b)):
        t = arm_transmission(cfg, node)
        eff = np.asarray(an.efficiency)
        # marginals of the pair state are maximally mixed: each detector sees 1/4
        per_det = r_pair * t * eff / 4.0 + np.asarray(an.dark_rate_hz)
        live[node] = float(np.mean(1.0 / (1.0 + per_det * an.dead_time_ps * 1e-12)))
        eta[node] = t * float(eff.mean())
        sig[node] = r_pair * eta[node]
        dark[node] = float(sum(an.dark_rate_hz))
    win = window_statistics(cfg)
    w_s = cfg.window_ps * 1e-12
    true_rate = r_pair * eta[ALICE] * eta[BOB] * win["capture"] * live[ALICE] * live[BOB]
    acc_rate = ((sig[ALICE] + dark[ALICE]) * (sig[BOB] + dark[BOB]) - sig[ALICE] * sig[BOB]) * w_s
    raw = true_rate + acc_rate
    if cfg.pc.mode == "optimize" and pc_angles is None:
        pc_angles, _ = choose_pc_angles(cfg, exact=True)
    pc = pc_matrix(cfg, pc_angles)
    c = win["coherence"]
    rho = np.zeros((4, 4), dtype=complex)
    rho[0, 0] = rho[3, 3] = 0.5
    rho[3, 0], rho[0, 3] = c / 2.0, np.conj(c) / 2.0
    rho = mix_with_white_noise(rho, src.kappa)
    rho_ch = apply_channel(rho, cfg.fiber_a.to_params(), cfg.fiber_b.to_params(), cfg.t2_ps, extra_b=pc)
    q_true = sifted_error_rate(rho_ch)
    qber = (true_rate * q_true + acc_rate * 0.5) / raw if raw > 0 else 0.0
    sifted = raw / 2.0
    key = sifted * (1.0 - cfg.sacrifice_fraction)
    n_seg = key * cfg.segment_s
    m = n_seg - pa_length(int(n_seg), min(qber, 1.0)) - ec_efficiency * binary_entropy(qber) * n_seg \
        - cfg.protocol.safety_margin_bits
    # g2 of Alice's X photons from a rectilinear/diagonal split, no background subtraction
    s1 = s2 = sig[ALICE] / 2.0 * live[ALICE]
    b1 = sum(cfg.analyzer_a.dark_rate_hz[:2])
    b2 = sum(cfg.analyzer_a.dark_rate_hz[2:])
    bg = (s1 * b2 + b1 * s2 + b1 * b2) * 1e-9
    side = s1 * s2 / src.rep_rate_hz * _signal_pair_capture(cfg, ALICE) + bg
    out.update({
        "pair_rate_hz": r_pair,
        "eta_a": eta[ALICE], "eta_b": eta[BOB],
        "singles_a_hz": sig[ALICE] + dark[ALICE], "singles_b_hz": sig[BOB] + dark[BOB],
        "window_capture": win["capture"], "window_center_ps": win["center_ps"],
        "window_coherence": [c.real, c.imag],
        "true_coincidence_rate_bps": true_rate, "accidental_rate_bps": acc_rate,
        "raw_rate_bps": raw, "sifted_rate_bps": sifted, "key_rate_bps": key,
        "qber_pairs": q_true, "qber": qber,
        "net_rate_bps": max(m, 0.0) / cfg.segment_s,
        "g2_x": bg / side if side > 0 else 0.0,
        "pc_angles_rad": list(pc_angles.theta) if pc_angles is not None else None,
    })
    return out


def calibrate(cfg: ScenarioConfig, key_rate_bps: float = 135.0, g2_target: float = 0.021) -> ScenarioConfig:
    """Fit a common coupling efficiency and a per-detector background rate.

    The coupling sets the key rate, the background (equal on all eight
    detectors) sets Alice's no-subtraction g2.
    """
    fixed_pc = cfg.pc.mode
    probe = cfg.replace(pc=dataclasses.replace(cfg.pc, mode="off")) if fixed_pc == "optimize" else cfg

    def with_params(coupling: float, dark: float) -> ScenarioConfig:
        return probe.replace(coupling_efficiency_a=coupling, coupling_efficiency_b=coupling,
                             analyzer_a=dataclasses.replace(probe.analyzer_a, dark_rate_hz=(dark,) * 4),
                             analyzer_b=dataclasses.replace(probe.analyzer_b, dark_rate_hz=(dark,) * 4))

    def dark_for(coupling: float) -> float:
        sig = expected_rates(with_params(coupling, 0.0))["singles_a_hz"]
        return optimize.brentq(lambda d: expected_rates(with_params(coupling, d))["g2_x"] - g2_target,
                               1e-6 * sig, sig)

    coupling = optimize.brentq(
        lambda k: expected_rates(with_params(k, dark_for(k)))["key_rate_bps"] - key_rate_bps, 1e-4, 1.0,
        xtol=1e-7)
    out = with_params(coupling, dark_for(coupling))
    return out.replace(pc=cfg.pc)
