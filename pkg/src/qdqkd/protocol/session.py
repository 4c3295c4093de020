"""Two-node key distillation over a transport.

Alice drives the session and generates all public seeds; Bob announces his
bases, reports the QBER and runs the Cascade corrector. Either side turns
any failure into an ABORT frame before raising, and no key leaves
:func:`run_session` unless the final confirmation tags match.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from ..sync import EmptySample
from . import wire
from .postprocess import (QBER_ABORT, QBER_WARN, SAFETY_MARGIN, TAG_BITS, CascadeCorrector,
                          CascadeResponder, KeyBuffer, LeakageLedger, bias_correct, confirm_tag,
                          gate, pa_length, privacy_amplify, reconciliation_qber, sacrifice_indices,
                          sacrifice_qber, seeded_rng, sift)
from .transport import Transport
from .wire import (AbortReason, IndexMismatch, KeyExhausted, MsgType, ProtocolError,
                   ProtocolViolation, ReconciliationFailed, TransportClosed)

log = logging.getLogger(__name__)

ALICE, BOB = "alice", "bob"


@dataclass(frozen=True)
class NodeFeed:
    """Index-aligned measurement record of one node: basis 0 = +, 1 = x."""

    bases: np.ndarray
    bits: np.ndarray
    duration_s: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "bases", np.asarray(self.bases, dtype=np.uint8))
        object.__setattr__(self, "bits", np.asarray(self.bits, dtype=np.uint8))
        if self.bases.shape != self.bits.shape or self.bases.ndim != 1:
            raise ValueError("bases and bits must be equal-length 1-d arrays")
        if ((self.bases > 1) | (self.bits > 1)).any():
            raise ValueError("bases and bits must be 0 or 1")

    def __len__(self) -> int:
        return int(self.bases.size)


@dataclass(frozen=True)
class SessionConfig:
    protocol_seed: int = 0
    session_id: int = 1
    sacrifice_fraction: float = 0.10
    qber_abort: float = QBER_ABORT
    qber_warn: float = QBER_WARN
    gate_z: float = 3.0
    ec_passes: int = 4
    safety_margin: int = SAFETY_MARGIN
    batch_size: int = 4096
    version: int = wire.PROTOCOL_VERSION

    def __post_init__(self):
        if not 0.0 < self.sacrifice_fraction < 1.0:
            raise ValueError("sacrifice_fraction must lie in (0, 1)")
        if not 0.0 < self.qber_warn <= self.qber_abort <= 0.5:
            raise ValueError("need 0 < qber_warn <= qber_abort <= 0.5")
        if self.ec_passes < 1 or self.batch_size < 1 or self.safety_margin < 0:
            raise ValueError("ec_passes and batch_size must be positive, safety_margin >= 0")


@dataclass
class SessionReport:
    role: str
    n_pairs: int
    n_sifted: int
    n_sacrificed: int
    qber: float
    qber_stderr: float
    di_warning: bool
    ec_input_bits: int
    parity_bits: int
    ec_passes: int
    corrected_bits: int
    pa_bound_l: int
    final_bits: int
    key: np.ndarray = field(repr=False)
    final_tag: int = 0
    ledger: LeakageLedger = field(default_factory=LeakageLedger)
    duration_s: float = 0.0
    wall_s: float = 0.0

    def key_bytes(self) -> bytes:
        return np.packbits(self.key).tobytes()

    def to_dict(self) -> dict:
        return {"role": self.role, "n_pairs": self.n_pairs, "n_sifted": self.n_sifted,
                "n_sacrificed": self.n_sacrificed, "qber": self.qber,
                "qber_stderr": self.qber_stderr, "di_warning": self.di_warning,
                "ec_input_bits": self.ec_input_bits, "parity_bits": self.parity_bits,
                "ec_passes": self.ec_passes, "corrected_bits": self.corrected_bits,
                "pa_bound_l": self.pa_bound_l, "final_bits": self.final_bits,
                "final_tag": f"{self.final_tag:016x}", "ledger": self.ledger.to_dict()}


class _Channel:
    """Typed receive with ABORT and ordering checks."""

    def __init__(self, transport: Transport):
        self.t = transport

    def send(self, mtype: MsgType, payload: bytes = b"") -> None:
        self.t.send(mtype, payload)

    def expect(self, *types: MsgType) -> tuple[MsgType, bytes]:
        mtype, payload = self.t.recv()
        if mtype == MsgType.ABORT:
            reason = wire.parse_abort(payload)
            cls = wire.ABORT_ERRORS.get(reason, ProtocolViolation)
            err = cls(f"peer aborted (reason {reason})")
            err.from_peer = True
            raise err
        if mtype not in types:
            raise ProtocolViolation(f"expected {[t.name for t in types]}, got {mtype.name}")
        return mtype, payload


def _draw_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63))


def run_session(role: str, transport: Transport, feed: NodeFeed,
                config: SessionConfig | None = None) -> SessionReport:
    """Run one side of the protocol to completion.

    Raises
    ------
    ThresholdExceeded, ReconciliationFailed, KeyExhausted, IndexMismatch,
    ProtocolViolation, TransportClosed
        After sending ABORT to the peer where the transport still works.
    """
    config = config or SessionConfig()
    if role not in (ALICE, BOB):
        raise ValueError("role must be 'alice' or 'bob'")
    ch = _Channel(transport)
    t_start = time.perf_counter()
    try:
        report = (_alice if role == ALICE else _bob)(ch, feed, config)
    except EmptySample as exc:
        err = KeyExhausted(f"no key material: {exc}")
        _send_abort(ch, err)
        raise err from exc
    except ProtocolError as exc:
        if not getattr(exc, "from_peer", False):
            _send_abort(ch, exc)
        raise
    report.wall_s = time.perf_counter() - t_start
    return report


def _send_abort(ch: _Channel, exc: BaseException) -> None:
    if isinstance(exc, TransportClosed):
        return
    try:
        ch.send(MsgType.ABORT, wire.abort(wire.reason_for(exc)))
    except TransportClosed:
        pass


def _hello(ch: _Channel, config: SessionConfig, initiator: bool) -> None:
    if initiator:
        ch.send(MsgType.HELLO, wire.hello(config.session_id, config.version))
    _, payload = ch.expect(MsgType.HELLO)
    version, session = wire.parse_hello(payload)
    if version != config.version:
        raise ProtocolViolation(f"protocol version {version} != {config.version}")
    if session != config.session_id:
        raise ProtocolViolation("session id mismatch")
    if not initiator:
        ch.send(MsgType.HELLO, wire.hello(config.session_id, config.version))


def _finish_report(role, feed, n_sifted, n_sac, q, se, cfg, ec_in, ledger, passes, corrected,
                   l_bound, final, tag) -> SessionReport:
    return SessionReport(role=role, n_pairs=len(feed), n_sifted=n_sifted, n_sacrificed=n_sac,
                         qber=q, qber_stderr=se, di_warning=q >= cfg.qber_warn,
                         ec_input_bits=ec_in, parity_bits=ledger.parity_bits_disclosed,
                         ec_passes=passes, corrected_bits=corrected, pa_bound_l=l_bound,
                         final_bits=int(final.size), key=final, final_tag=tag, ledger=ledger,
                         duration_s=feed.duration_s)


# --- Alice ------------------------------------------------------------------

def _alice(ch: _Channel, feed: NodeFeed, cfg: SessionConfig) -> SessionReport:
    seeds = seeded_rng(cfg.protocol_seed, cfg.session_id)
    ledger = LeakageLedger(safety_margin=cfg.safety_margin)
    _hello(ch, cfg, initiator=True)

    # Bob's bases, batched, terminated by an empty batch
    remote = []
    expected_start = 0
    while True:
        _, payload = ch.expect(MsgType.BASIS_BATCH)
        start, bases = wire.parse_basis_batch(payload)
        if start != expected_start:
            raise ProtocolViolation("basis batches out of order")
        if bases.size == 0:
            break
        remote.append(bases)
        expected_start += bases.size
    remote_bases = np.concatenate(remote) if remote else np.zeros(0, np.uint8)
    if remote_bases.size != len(feed):
        raise IndexMismatch(f"{len(feed)} local pairs, {remote_bases.size} announced by the peer")
    keep = (feed.bases == remote_bases).astype(np.uint8)
    ch.send(MsgType.SIFT_KEEPLIST, wire.bitmap(keep))
    key = sift(feed.bases, feed.bits, remote_bases)
    n_sifted = len(key)

    sac_seed = _draw_seed(seeds)
    ch.send(MsgType.SACRIFICE_SEED, wire.u64(sac_seed))
    idx = sacrifice_indices(n_sifted, cfg.sacrifice_fraction, sac_seed)
    ch.send(MsgType.SACRIFICE_BITS, wire.bitmap(key.bits[idx]))
    ledger.add_sacrificed(idx.size)
    remaining = np.ones(n_sifted, dtype=bool)
    remaining[idx] = False
    key = key.take(remaining)

    _, payload = ch.expect(MsgType.QBER_REPORT)
    q, se = wire.parse_qber_report(payload)
    if not (0.0 <= q <= 1.0 and se >= 0.0):
        raise ProtocolViolation("malformed QBER report")
    if q >= cfg.qber_warn:
        log.warning("QBER %.4f above the %.0f%% device-independent threshold", q, 100 * cfg.qber_warn)
    gate(q, se, cfg.qber_abort, cfg.gate_z)

    mask_seed = _draw_seed(seeds)
    ch.send(MsgType.MASK_SEED, wire.u64(mask_seed))
    key = bias_correct(key, mask_seed)

    perm_seed = _draw_seed(seeds)
    ch.send(MsgType.EC_PERM_SEED, wire.u64(perm_seed))
    if len(key) == 0:
        raise KeyExhausted("nothing left to reconcile")
    responder = CascadeResponder(key.bits, reconciliation_qber(q, idx.size), perm_seed)

    def serve_pass(p: int) -> None:
        ch.send(MsgType.EC_PARITIES, wire.ec_parities(p, responder.top_parities(p)))
        ledger.add_parities(responder.layout.n_blocks(p), f"ec_pass{p}")
        while True:
            _, payload = ch.expect(MsgType.EC_BISECT)
            ids, pars = wire.parse_ec_bisect(payload)
            if ids.size == 0:
                return
            if (pars != wire.BISECT_QUERY).any():
                raise ProtocolViolation("bisect request carries parity values")
            ch.send(MsgType.EC_BISECT, wire.ec_bisect(ids, responder.answer(ids)))
            ledger.add_parities(ids.size, f"ec_pass{p}")

    passes = cfg.ec_passes
    for p in range(passes):
        serve_pass(p)
    for round_no in (0, 1):
        tag = confirm_tag(key.bits, perm_seed, round_no)
        ch.send(MsgType.CONFIRM_HASH, wire.u64(tag))
        ledger.add_confirm(TAG_BITS)
        _, payload = ch.expect(MsgType.CONFIRM_HASH)
        if wire.parse_u64(payload) == tag:
            break
        if round_no == 1:
            raise ReconciliationFailed("confirmation tags differ after the extra pass")
        serve_pass(passes)
        passes += 1

    n = len(key)
    l_bound = pa_length(n, q)
    ledger.set_pa_bound(l_bound)
    m = n - l_bound - ledger.parity_bits_disclosed - cfg.safety_margin
    if m <= 0:
        raise KeyExhausted(f"{n} reconciled bits leave no secure key (M = {m})")
    seed_bits = seeds.integers(0, 2, size=n + m - 1, dtype=np.uint8)
    ch.send(MsgType.PA_PARAMS, wire.pa_params(m, seed_bits))
    final = privacy_amplify(key, m, seed_bits)

    final_tag = confirm_tag(final, perm_seed, 2)
    ch.send(MsgType.CONFIRM_HASH, wire.u64(final_tag))
    _, payload = ch.expect(MsgType.CONFIRM_HASH)
    if wire.parse_u64(payload) != final_tag:
        raise ReconciliationFailed("final keys differ")
    return _finish_report(ALICE, feed, n_sifted, idx.size, q, se, cfg, n, ledger, passes, 0,
                          l_bound, final, final_tag)


# --- Bob --------------------------------------------------------------------

def _bob(ch: _Channel, feed: NodeFeed, cfg: SessionConfig) -> SessionReport:
    ledger = LeakageLedger(safety_margin=cfg.safety_margin)
    _hello(ch, cfg, initiator=False)

    for start in range(0, len(feed), cfg.batch_size):
        ch.send(MsgType.BASIS_BATCH, wire.basis_batch(start, feed.bases[start:start + cfg.batch_size]))
    ch.send(MsgType.BASIS_BATCH, wire.basis_batch(len(feed), []))
    _, payload = ch.expect(MsgType.SIFT_KEEPLIST)
    keep = wire.parse_bitmap(payload)
    if keep.size != len(feed):
        raise IndexMismatch("keep list length differs from the local record")
    idx_keep = np.flatnonzero(keep)
    key = KeyBuffer(feed.bits[idx_keep], idx_keep)
    n_sifted = len(key)

    _, payload = ch.expect(MsgType.SACRIFICE_SEED)
    sac_seed = wire.parse_u64(payload)
    _, payload = ch.expect(MsgType.SACRIFICE_BITS)
    revealed = wire.parse_bitmap(payload)
    q, se, key = sacrifice_qber(key, revealed, cfg.sacrifice_fraction, sac_seed)
    ledger.add_sacrificed(revealed.size)
    ch.send(MsgType.QBER_REPORT, wire.qber_report(q, se))
    if q >= cfg.qber_warn:
        log.warning("QBER %.4f above the %.0f%% device-independent threshold", q, 100 * cfg.qber_warn)

    _, payload = ch.expect(MsgType.MASK_SEED)
    key = bias_correct(key, wire.parse_u64(payload))
    _, payload = ch.expect(MsgType.EC_PERM_SEED)
    perm_seed = wire.parse_u64(payload)
    corrector = CascadeCorrector(key.bits, reconciliation_qber(q, revealed.size), perm_seed)

    def run_pass(p: int) -> None:
        _, payload = ch.expect(MsgType.EC_PARITIES)
        pass_no, parities = wire.parse_ec_parities(payload)
        if pass_no != p:
            raise ProtocolViolation(f"parities for pass {pass_no}, expected {p}")
        corrector.start_pass(p, parities)
        ledger.add_parities(parities.size, f"ec_pass{p}")
        while True:
            ids = corrector.pending_queries()
            ch.send(MsgType.EC_BISECT, wire.ec_bisect(ids, [wire.BISECT_QUERY] * len(ids)))
            if not ids:
                return
            _, payload = ch.expect(MsgType.EC_BISECT)
            got, pars = wire.parse_ec_bisect(payload)
            if got.tolist() != ids:
                raise ProtocolViolation("bisect reply does not match the request")
            corrector.answer(got, pars)
            ledger.add_parities(len(ids), f"ec_pass{p}")

    passes = cfg.ec_passes
    for p in range(passes):
        run_pass(p)
    for round_no in (0, 1):
        _, payload = ch.expect(MsgType.CONFIRM_HASH)
        ledger.add_confirm(TAG_BITS)
        tag = confirm_tag(corrector.bits, perm_seed, round_no)
        ch.send(MsgType.CONFIRM_HASH, wire.u64(tag))
        if wire.parse_u64(payload) == tag:
            break
        if round_no == 1:
            raise ReconciliationFailed("confirmation tags differ after the extra pass")
        run_pass(passes)
        passes += 1

    n = corrector.bits.size
    l_bound = pa_length(n, q)
    ledger.set_pa_bound(l_bound)
    _, payload = ch.expect(MsgType.PA_PARAMS)
    m, seed_bits = wire.parse_pa_params(payload)
    if m != n - l_bound - ledger.parity_bits_disclosed - cfg.safety_margin:
        raise ProtocolViolation("announced output length disagrees with the local ledger")
    if seed_bits.size != n + m - 1:
        raise ProtocolViolation("Toeplitz seed has the wrong length")
    final = privacy_amplify(corrector.bits, m, seed_bits)

    final_tag = confirm_tag(final, perm_seed, 2)
    _, payload = ch.expect(MsgType.CONFIRM_HASH)
    ch.send(MsgType.CONFIRM_HASH, wire.u64(final_tag))
    if wire.parse_u64(payload) != final_tag:
        raise ReconciliationFailed("final keys differ")
    return _finish_report(BOB, feed, n_sifted, revealed.size, q, se, cfg, n, ledger, passes,
                          corrector.flips, l_bound, final, final_tag)


# --- local driver -----------------------------------------------------------

@dataclass
class PairOutcome:
    alice: SessionReport | None
    bob: SessionReport | None
    alice_error: BaseException | None
    bob_error: BaseException | None
    transcript_alice: bytes
    transcript_bob: bytes

    @property
    def ok(self) -> bool:
        return self.alice_error is None and self.bob_error is None


def run_pair(feed_a: NodeFeed, feed_b: NodeFeed, config: SessionConfig | None = None,
             transport: str = "pipe", timeout: float = 30.0) -> PairOutcome:
    """Run both roles in threads over a fresh transport pair."""
    import threading

    from .transport import duplex_pipe, socket_pair_localhost

    ta, tb = duplex_pipe(timeout) if transport == "pipe" else socket_pair_localhost(timeout)
    results: dict = {}

    def node(role, t, feed):
        try:
            results[role] = (run_session(role, t, feed, config), None)
        except BaseException as exc:  # noqa: BLE001 - reported to the caller
            results[role] = (None, exc)
            t.close()

    threads = [threading.Thread(target=node, args=(ALICE, ta, feed_a)),
               threading.Thread(target=node, args=(BOB, tb, feed_b))]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    ta.close()
    tb.close()
    (ra, ea), (rb, eb) = results[ALICE], results[BOB]
    return PairOutcome(ra, rb, ea, eb, ta.transcript_bytes(), tb.transcript_bytes())
