"""Length-prefixed frames of the classical channel.

A frame is ``u32`` big-endian length (counting the type byte and payload),
``u8`` message type, payload. All multi-byte payload fields are big-endian.
Bit strings are packed MSB-first with ``numpy.packbits``.
"""
from __future__ import annotations

import struct
from enum import IntEnum

import numpy as np

PROTOCOL_VERSION = 1
HEADER = struct.Struct(">IB")
MAX_FRAME = 1 << 28


class ProtocolError(Exception):
    """Base for every condition that aborts a session (CLI exit code 3)."""


class ProtocolViolation(ProtocolError):
    pass


class TransportClosed(ProtocolError):
    pass


class MsgType(IntEnum):
    HELLO = 0x01
    BASIS_BATCH = 0x02
    SIFT_KEEPLIST = 0x03
    SACRIFICE_SEED = 0x04
    SACRIFICE_BITS = 0x05
    QBER_REPORT = 0x06
    MASK_SEED = 0x07
    EC_PERM_SEED = 0x08
    EC_PARITIES = 0x09
    EC_BISECT = 0x0A
    CONFIRM_HASH = 0x0B
    PA_PARAMS = 0x0C
    ABORT = 0x0D


class AbortReason(IntEnum):
    THRESHOLD = 1
    RECONCILIATION = 2
    KEY_EXHAUSTED = 3
    VIOLATION = 4
    INDEX_MISMATCH = 5


# parity field of an EC_BISECT entry sent by Bob: "please disclose"
BISECT_QUERY = 0xFF


def encode_frame(mtype: int, payload: bytes = b"") -> bytes:
    if len(payload) + 1 > MAX_FRAME:
        raise ValueError("frame too large")
    return HEADER.pack(len(payload) + 1, int(mtype)) + payload


def decode_header(header: bytes) -> tuple[int, int]:
    """``(payload_length, type)`` from the five header bytes."""
    length, mtype = HEADER.unpack(header)
    if length < 1 or length > MAX_FRAME:
        raise ProtocolViolation(f"bad frame length {length}")
    return length - 1, mtype


def decode_frame(frame: bytes) -> tuple[MsgType, bytes]:
    if len(frame) < HEADER.size:
        raise ProtocolViolation("truncated frame")
    n, mtype = decode_header(frame[:HEADER.size])
    payload = frame[HEADER.size:]
    if len(payload) != n:
        raise ProtocolViolation("frame length mismatch")
    return parse_type(mtype), payload


def parse_type(mtype: int) -> MsgType:
    try:
        return MsgType(mtype)
    except ValueError:
        raise ProtocolViolation(f"unknown message type 0x{mtype:02x}") from None


def pack_bits(bits) -> bytes:
    return np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes()


def unpack_bits(data: bytes, n: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
    if bits.size < n:
        raise ProtocolViolation("bit field shorter than announced")
    return bits[:n].astype(np.uint8)


# --- payload codecs ---------------------------------------------------------

def hello(session: int, version: int = PROTOCOL_VERSION) -> bytes:
    return struct.pack(">HQ", version, session)


def parse_hello(p: bytes) -> tuple[int, int]:
    _need(p, 10)
    return struct.unpack(">HQ", p)


def basis_batch(start: int, bases) -> bytes:
    bases = np.asarray(bases, dtype=np.uint8)
    return struct.pack(">QI", start, bases.size) + pack_bits(bases)


def parse_basis_batch(p: bytes) -> tuple[int, np.ndarray]:
    _need(p, 12, exact=False)
    start, count = struct.unpack(">QI", p[:12])
    if len(p) != 12 + (count + 7) // 8:
        raise ProtocolViolation("basis batch size mismatch")
    return start, unpack_bits(p[12:], count)


def bitmap(bits) -> bytes:
    bits = np.asarray(bits, dtype=np.uint8)
    return struct.pack(">Q", bits.size) + pack_bits(bits)


def parse_bitmap(p: bytes) -> np.ndarray:
    _need(p, 8, exact=False)
    (n,) = struct.unpack(">Q", p[:8])
    if len(p) != 8 + (n + 7) // 8:
        raise ProtocolViolation("bitmap size mismatch")
    return unpack_bits(p[8:], n)


def u64(x: int) -> bytes:
    return struct.pack(">Q", x)


def parse_u64(p: bytes) -> int:
    _need(p, 8)
    return struct.unpack(">Q", p)[0]


def qber_report(q: float, stderr: float) -> bytes:
    return struct.pack(">dd", q, stderr)


def parse_qber_report(p: bytes) -> tuple[float, float]:
    _need(p, 16)
    return struct.unpack(">dd", p)


def ec_parities(pass_no: int, parities) -> bytes:
    parities = np.asarray(parities, dtype=np.uint8)
    return struct.pack(">BI", pass_no, parities.size) + pack_bits(parities)


def parse_ec_parities(p: bytes) -> tuple[int, np.ndarray]:
    _need(p, 5, exact=False)
    pass_no, n = struct.unpack(">BI", p[:5])
    if len(p) != 5 + (n + 7) // 8:
        raise ProtocolViolation("parity block size mismatch")
    return pass_no, unpack_bits(p[5:], n)


_BISECT = np.dtype([("block", ">u4"), ("parity", "u1")])


def ec_bisect(ids, parities) -> bytes:
    rec = np.empty(len(ids), dtype=_BISECT)
    rec["block"] = ids
    rec["parity"] = parities
    return rec.tobytes()


def parse_ec_bisect(p: bytes) -> tuple[np.ndarray, np.ndarray]:
    if len(p) % _BISECT.itemsize:
        raise ProtocolViolation("bisect payload size mismatch")
    rec = np.frombuffer(p, dtype=_BISECT)
    return rec["block"].astype(np.int64), rec["parity"].astype(np.uint8)


def pa_params(out_len: int, seed_bits) -> bytes:
    seed_bits = np.asarray(seed_bits, dtype=np.uint8)
    return struct.pack(">II", out_len, seed_bits.size) + pack_bits(seed_bits)


def parse_pa_params(p: bytes) -> tuple[int, np.ndarray]:
    _need(p, 8, exact=False)
    out_len, n = struct.unpack(">II", p[:8])
    if len(p) != 8 + (n + 7) // 8:
        raise ProtocolViolation("PA seed size mismatch")
    return out_len, unpack_bits(p[8:], n)


def abort(reason: int) -> bytes:
    return struct.pack(">B", int(reason))


def parse_abort(p: bytes) -> int:
    _need(p, 1)
    return p[0]


def _need(p: bytes, n: int, exact: bool = True) -> None:
    if (exact and len(p) != n) or len(p) < n:
        raise ProtocolViolation(f"payload of {len(p)} bytes, expected {n}")


class ThresholdExceeded(ProtocolError):
    pass


class ReconciliationFailed(ProtocolError):
    pass


class KeyExhausted(ProtocolError):
    pass


class IndexMismatch(ProtocolError):
    pass


ABORT_ERRORS = {
    AbortReason.THRESHOLD: ThresholdExceeded,
    AbortReason.RECONCILIATION: ReconciliationFailed,
    AbortReason.KEY_EXHAUSTED: KeyExhausted,
    AbortReason.VIOLATION: ProtocolViolation,
    AbortReason.INDEX_MISMATCH: IndexMismatch,
}


def reason_for(exc: BaseException) -> AbortReason:
    for reason, cls in ABORT_ERRORS.items():
        if isinstance(exc, cls):
            return reason
    return AbortReason.VIOLATION
