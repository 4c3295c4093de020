"""Sifting, sacrifice, bias mask, Cascade reconciliation and privacy amplification.

Every function here is local; :mod:`qdqkd.protocol.session` moves the same
objects across a transport. Public randomness is derived from 64-bit seeds
with ``numpy.random.default_rng`` so both nodes draw identical subsets,
masks and permutations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import _kernels
from ..sync import EmptySample, qber_estimate
from .wire import IndexMismatch, KeyExhausted, ProtocolViolation, ReconciliationFailed, ThresholdExceeded

QBER_ABORT = 0.11
QBER_WARN = 0.07
SAFETY_MARGIN = 64
TAG_BITS = 64
# Cascade block heuristic k1 = 0.73 / q; q is floored so that q = 0 still gives finite blocks
MIN_BLOCK_QBER = 1e-3
PASS_SHIFT = 28
_TAG_DOMAIN = 0xC0F1


@dataclass
class KeyBuffer:
    """Key bits with the pair indices they came from."""

    bits: np.ndarray
    origin: np.ndarray
    tag: int | None = None

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        self.origin = np.asarray(self.origin, dtype=np.int64)
        if self.bits.shape != self.origin.shape:
            raise ValueError("bits and origin must have equal length")

    def __len__(self) -> int:
        return int(self.bits.size)

    def take(self, idx) -> "KeyBuffer":
        return KeyBuffer(self.bits[idx], self.origin[idx])

    def ones_fraction(self) -> float:
        return float(self.bits.mean()) if len(self) else 0.0


@dataclass(frozen=True)
class SiftRecord:
    pair_index: int
    basis: int
    bit: int | None
    sacrificed: bool = False


@dataclass
class LeakageLedger:
    """Public information about the key, in bits. Counts only ever grow."""

    sacrificed_bits: int = 0
    parity_bits_disclosed: int = 0
    confirm_bits: int = 0
    pa_bound_l: int = 0
    safety_margin: int = SAFETY_MARGIN
    stages: list = field(default_factory=list)

    def _bump(self, name: str, n: int, stage: str) -> None:
        if n < 0:
            raise ValueError("leakage counts are monotone")
        setattr(self, name, getattr(self, name) + int(n))
        self.stages.append({"stage": stage, name: int(n)})

    def add_sacrificed(self, n: int) -> None:
        self._bump("sacrificed_bits", n, "sacrifice")

    def add_parities(self, n: int, stage: str = "ec") -> None:
        self._bump("parity_bits_disclosed", n, stage)

    def add_confirm(self, n: int = TAG_BITS) -> None:
        self._bump("confirm_bits", n, "confirm")

    def set_pa_bound(self, l: int) -> None:
        if l < self.pa_bound_l:
            raise ValueError("leakage counts are monotone")
        self.pa_bound_l = int(l)
        self.stages.append({"stage": "pa", "pa_bound_l": int(l)})

    def to_dict(self) -> dict:
        return {"sacrificed_bits": self.sacrificed_bits,
                "parity_bits_disclosed": self.parity_bits_disclosed,
                "confirm_bits": self.confirm_bits,
                "pa_bound_l": self.pa_bound_l,
                "safety_margin": self.safety_margin,
                "stages": list(self.stages)}


def seeded_rng(*words: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(w) for w in words]))


# --- sifting and sampling ---------------------------------------------------

def sift(local_bases, local_bits, remote_bases) -> KeyBuffer:
    """Keep positions where both nodes chose the same basis."""
    local_bases = np.asarray(local_bases, dtype=np.uint8)
    local_bits = np.asarray(local_bits, dtype=np.uint8)
    remote_bases = np.asarray(remote_bases, dtype=np.uint8)
    if not (local_bases.size == local_bits.size == remote_bases.size):
        raise IndexMismatch(f"stream lengths differ: {local_bases.size} local vs "
                            f"{remote_bases.size} remote")
    keep = np.flatnonzero(local_bases == remote_bases)
    return KeyBuffer(local_bits[keep], keep)


def sift_records(local_bases, local_bits, remote_bases):
    """Per-pair view of :func:`sift`."""
    kept = set(sift(local_bases, local_bits, remote_bases).origin.tolist())
    for i, (b, x) in enumerate(zip(np.asarray(local_bases).tolist(), np.asarray(local_bits).tolist())):
        yield SiftRecord(i, b, x if i in kept else None)


def sacrifice_indices(n: int, fraction: float, seed: int) -> np.ndarray:
    """Sorted positions of the publicly compared subset."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("sacrifice fraction must lie in [0, 1]")
    k = int(round(fraction * n))
    return np.sort(seeded_rng(seed, 0x5AC).permutation(n)[:k])


def sacrifice_qber(local: KeyBuffer, remote_revealed, fraction: float, seed: int):
    """Compare the sacrificed subset and drop it from the key.

    Returns ``(qber, stderr, remaining)``.
    """
    idx = sacrifice_indices(len(local), fraction, seed)
    remote_revealed = np.asarray(remote_revealed, dtype=np.uint8)
    if remote_revealed.size != idx.size:
        raise ProtocolViolation("revealed subset has the wrong size")
    if idx.size == 0:
        raise EmptySample("no bits to sacrifice")
    q, stderr = qber_estimate(local.bits[idx], remote_revealed)
    keep = np.ones(len(local), dtype=bool)
    keep[idx] = False
    return q, stderr, local.take(keep)


def gate(q: float, stderr: float, abort_at: float = QBER_ABORT, z: float = 3.0) -> None:
    """Abort unless the QBER is confidently below ``abort_at``."""
    if q >= abort_at or q + z * stderr >= abort_at:
        raise ThresholdExceeded(f"QBER {q:.4f} (+{z:g} sigma = {q + z * stderr:.4f}) "
                                f"reaches the {abort_at:.0%} limit")


def bias_mask(n: int, seed: int) -> np.ndarray:
    """Bit mask with exactly ``n // 2`` ones at pseudorandom positions."""
    mask = np.zeros(n, dtype=np.uint8)
    mask[seeded_rng(seed, 0xB1A5).permutation(n)[: n // 2]] = 1
    return mask


def bias_correct(key: KeyBuffer, seed: int) -> KeyBuffer:
    return KeyBuffer(key.bits ^ bias_mask(len(key), seed), key.origin)


# --- privacy amplification --------------------------------------------------

def pa_length(n: int, q: float) -> int:
    """``ceil(4 n q + 5 sqrt(12 n q))`` bits of intercepted information."""
    if n < 0 or not 0.0 <= q <= 1.0:
        raise ValueError("need n >= 0 and q in [0, 1]")
    x = 4.0 * n * q + 5.0 * math.sqrt(12.0 * n * q)
    # guard against 800.0000000001-style representation error
    return int(math.ceil(round(x, 9)))


def pa_output_length(n: int, q: float, parity_bits: int, safety: int = SAFETY_MARGIN) -> int:
    return n - pa_length(n, q) - parity_bits - safety


def toeplitz_seed(n: int, m: int, seed: int) -> np.ndarray:
    return seeded_rng(seed, 0x7E0).integers(0, 2, size=n + m - 1, dtype=np.uint8)


def privacy_amplify(key, out_len: int, seed_bits) -> np.ndarray:
    """Toeplitz hash of ``key`` to ``out_len`` bits."""
    key = np.asarray(key.bits if isinstance(key, KeyBuffer) else key, dtype=np.uint8)
    if out_len <= 0:
        raise KeyExhausted(f"no secure key left (output length {out_len})")
    seed_bits = np.asarray(seed_bits, dtype=np.uint8)
    if seed_bits.size != key.size + out_len - 1:
        raise ValueError("Toeplitz seed must have n + m - 1 bits")
    return _kernels.toeplitz_hash(key, seed_bits, out_len)


def confirm_tag(bits, seed: int, round_no: int) -> int:
    """64-bit universal-hash tag of a key."""
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.size == 0:
        return 0
    s = seeded_rng(seed, _TAG_DOMAIN, round_no).integers(0, 2, size=bits.size + TAG_BITS - 1,
                                                          dtype=np.uint8)
    out = _kernels.toeplitz_hash(bits, s, TAG_BITS)
    return int.from_bytes(np.packbits(out).tobytes(), "big")


# --- Cascade ----------------------------------------------------------------

def first_block_size(q: float, n: int) -> int:
    if q >= QBER_ABORT:
        raise ThresholdExceeded(f"QBER estimate {q:.4f} too high for reconciliation")
    return max(1, min(n, math.ceil(0.73 / max(q, MIN_BLOCK_QBER))))


def reconciliation_qber(q: float, n_sampled: int, z: float = 2.0) -> float:
    """Upper confidence value of the QBER used to size Cascade blocks.

    A small sacrifice sample often under-reports the error rate (zero errors
    in a few hundred bits is common at 2 %), and blocks sized for the point
    estimate then leave residual errors.
    """
    if n_sampled <= 0:
        return max(q, MIN_BLOCK_QBER)
    spread = math.sqrt(max(q, 1.0 / n_sampled) * (1.0 - q) / n_sampled)
    return min(q + z * spread, 0.95 * QBER_ABORT)


class _Layout:
    """Block structure of every pass; shared by both roles."""

    def __init__(self, n: int, k1: int, seed: int):
        if n >= 1 << (PASS_SHIFT - 2):
            raise ValueError("key too long for 28-bit node ids")
        self.n = n
        self.k1 = k1
        self.seed = seed
        self.perms: list[np.ndarray] = []
        self.inv: list[np.ndarray] = []
        self.ks: list[int] = []
        self.depth_bits: list[int] = []

    def ensure(self, p: int) -> None:
        while len(self.perms) <= p:
            q = len(self.perms)
            perm = (np.arange(self.n) if q == 0
                    else seeded_rng(self.seed, 0xCA5, q).permutation(self.n))
            inv = np.empty_like(perm)
            inv[perm] = np.arange(self.n)
            k = min(self.n, self.k1 << q) if self.n else 1
            self.perms.append(perm)
            self.inv.append(inv)
            self.ks.append(max(k, 1))
            self.depth_bits.append(max(1, math.ceil(math.log2(max(k, 1)))) + 1)

    def n_blocks(self, p: int) -> int:
        return -(-self.n // self.ks[p])

    def block_parities(self, bits: np.ndarray, p: int) -> np.ndarray:
        permuted = bits[self.perms[p]].astype(np.int64)
        starts = np.arange(0, self.n, self.ks[p])
        return (np.add.reduceat(permuted, starts) & 1).astype(np.uint8) if self.n else np.zeros(0, np.uint8)

    def node_id(self, p: int, block: int, heap: int) -> int:
        return (p << PASS_SHIFT) | (block << self.depth_bits[p]) | heap

    def decode(self, node: int) -> tuple[int, int, int]:
        p = node >> PASS_SHIFT
        if p >= len(self.perms):
            raise ProtocolViolation(f"node {node:#x} refers to an unannounced pass")
        rest = node & ((1 << PASS_SHIFT) - 1)
        d = self.depth_bits[p]
        block, heap = rest >> d, rest & ((1 << d) - 1)
        if block >= self.n_blocks(p) or heap < 1:
            raise ProtocolViolation(f"node {node:#x} out of range")
        return p, block, heap

    def positions(self, p: int, block: int, heap: int) -> np.ndarray:
        k = self.ks[p]
        lo0 = block * k
        lo, hi = 0, min(k, self.n - lo0)
        for bit in bin(heap)[3:]:
            if hi - lo < 2:
                raise ProtocolViolation("node below a leaf")
            mid = (lo + hi) // 2
            lo, hi = (lo, mid) if bit == "0" else (mid, hi)
        return self.perms[p][lo0 + lo:lo0 + hi]


class CascadeResponder:
    """Alice's side: discloses parities of her fixed key on request."""

    def __init__(self, bits, q_est: float, perm_seed: int):
        self.bits = np.asarray(bits, dtype=np.uint8).copy()
        self.layout = _Layout(self.bits.size, first_block_size(q_est, max(self.bits.size, 1)), perm_seed)
        self.disclosed = 0

    def top_parities(self, p: int) -> np.ndarray:
        self.layout.ensure(p)
        out = self.layout.block_parities(self.bits, p)
        self.disclosed += out.size
        return out

    def answer(self, ids) -> np.ndarray:
        out = np.empty(len(ids), dtype=np.uint8)
        for i, node in enumerate(ids):
            pos = self.layout.positions(*self.layout.decode(int(node)))
            out[i] = int(self.bits[pos].sum()) & 1
        self.disclosed += len(ids)
        return out


class CascadeCorrector:
    """Bob's side: finds and flips his errors by binary search on parities.

    Drive it with :meth:`start_pass`, then alternate :meth:`pending_queries`
    and :meth:`answer` until no queries remain.
    """

    def __init__(self, bits, q_est: float, perm_seed: int):
        self.bits = np.asarray(bits, dtype=np.uint8).copy()
        self.layout = _Layout(self.bits.size, first_block_size(q_est, max(self.bits.size, 1)), perm_seed)
        self.alice_top: list[np.ndarray] = []
        self.bob_top: list[np.ndarray] = []
        self.cache: dict[int, int] = {}
        self.active: dict[tuple[int, int], int] = {}  # (pass, block) -> heap node under search
        self.flips = 0
        self._asked: set[int] = set()
        self.queried = 0
        self.disclosed = 0

    def start_pass(self, p: int, alice_parities) -> None:
        if p != len(self.alice_top):
            raise ProtocolViolation(f"pass {p} announced out of order")
        self.layout.ensure(p)
        alice_parities = np.asarray(alice_parities, dtype=np.uint8)
        if alice_parities.size != self.layout.n_blocks(p):
            raise ProtocolViolation("wrong number of block parities")
        self.alice_top.append(alice_parities.copy())
        self.bob_top.append(self.layout.block_parities(self.bits, p))
        self.disclosed += alice_parities.size
        for b, par in enumerate(alice_parities.tolist()):
            self.cache[self.layout.node_id(p, b, 1)] = par

    def _parity(self, p: int, block: int, heap: int) -> int:
        return int(self.bits[self.layout.positions(p, block, heap)].sum()) & 1

    def _flip(self, pos: int) -> None:
        self.bits[pos] ^= 1
        self.flips += 1
        for p in range(len(self.bob_top)):
            self.bob_top[p][self.layout.inv[p][pos] // self.layout.ks[p]] ^= 1

    def _size(self, p: int, block: int, heap: int) -> int:
        return self.layout.positions(p, block, heap).size

    def pending_queries(self) -> list[int]:
        """Advance every search as far as cached parities allow.

        Returns the node ids whose parity Alice must disclose next; an empty
        list means every block of every started pass agrees in parity.
        """
        lay = self.layout
        while True:
            for p in range(len(self.alice_top)):
                for b in np.flatnonzero(self.alice_top[p] != self.bob_top[p]).tolist():
                    self.active.setdefault((p, b), 1)
            queries: list[int] = []
            flipped = False
            for key in sorted(self.active):
                p, b = key
                heap = self.active[key]
                # a flip made earlier in this sweep may already have fixed this node
                if self._parity(p, b, heap) == self.cache[lay.node_id(p, b, heap)]:
                    del self.active[key]
                    continue
                while self._size(p, b, heap) > 1:
                    left = lay.node_id(p, b, 2 * heap)
                    if left not in self.cache:
                        queries.append(left)
                        break
                    heap = 2 * heap if self._parity(p, b, 2 * heap) != self.cache[left] else 2 * heap + 1
                if self._size(p, b, heap) == 1:
                    self._flip(int(lay.positions(p, b, heap)[0]))
                    del self.active[key]
                    flipped = True
                else:
                    self.active[key] = heap
            if queries or not flipped:
                self._asked = set(queries)
                return queries

    def answer(self, ids, parities) -> None:
        lay = self.layout
        ids = [int(x) for x in ids]
        if set(ids) != self._asked or len(ids) != len(self._asked):
            raise ProtocolViolation("parities answer nodes that were not queried")
        for node, par in zip(ids, parities):
            par = int(par)
            if par > 1:
                raise ProtocolViolation("parity must be 0 or 1")
            p, b, heap = lay.decode(node)
            self.cache[node] = par
            self.cache[node ^ 1] = self.cache[lay.node_id(p, b, heap >> 1)] ^ par
        self._asked = set()
        self.queried += len(ids)
        self.disclosed += len(ids)


@dataclass
class EcResult:
    bits: np.ndarray
    parity_bits: int
    passes: int
    corrected: int
    confirm_rounds: int


def error_correct(key_a, key_b, q_est: float, perm_seed: int, passes: int = 4,
                  confirm: bool = True) -> EcResult:
    """Reconcile ``key_b`` to ``key_a`` with both roles wired in-process.

    Returns Bob's corrected key and the number of parity bits disclosed.
    With ``confirm`` a 64-bit tag comparison follows; one extra pass is run
    on mismatch before giving up.

    Raises
    ------
    ReconciliationFailed
        The tags still differ after the extra pass.
    """
    a = np.asarray(key_a.bits if isinstance(key_a, KeyBuffer) else key_a, dtype=np.uint8)
    b = np.asarray(key_b.bits if isinstance(key_b, KeyBuffer) else key_b, dtype=np.uint8)
    if a.size != b.size:
        raise IndexMismatch("keys differ in length")
    alice = CascadeResponder(a, q_est, perm_seed)
    bob = CascadeCorrector(b, q_est, perm_seed)

    def run_pass(p: int) -> None:
        bob.start_pass(p, alice.top_parities(p))
        while True:
            ids = bob.pending_queries()
            if not ids:
                return
            bob.answer(ids, alice.answer(ids))

    for p in range(passes):
        run_pass(p)
    rounds = 0
    n_pass = passes
    if confirm:
        rounds = 1
        if confirm_tag(a, perm_seed, 0) != confirm_tag(bob.bits, perm_seed, 0):
            run_pass(n_pass)
            n_pass += 1
            rounds = 2
            if confirm_tag(a, perm_seed, 1) != confirm_tag(bob.bits, perm_seed, 1):
                raise ReconciliationFailed("keys still differ after the extra pass")
    return EcResult(bob.bits, alice.disclosed, n_pass, bob.flips, rounds)


def binary_entropy(q: float) -> float:
    if q <= 0.0 or q >= 1.0:
        return 0.0
    return -q * math.log2(q) - (1 - q) * math.log2(1 - q)
