"""One-time-pad encryption with distilled key material.

Key files are packed bit strings (``key_alice.bin``). Every encryption
records the byte range it consumed in a JSON sidecar next to the key file
(``<key>.used.json``); a later encryption overlapping a recorded range is
refused. Decryption re-uses the pad that encrypted the message and therefore
records nothing.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np


class OtpError(Exception):
    pass


class KeyTooShort(OtpError):
    pass


class KeyReused(OtpError):
    pass


def xor_bytes(data: bytes, pad: bytes) -> bytes:
    if len(pad) < len(data):
        raise KeyTooShort(f"{len(data)} bytes of data but only {len(pad)} bytes of key")
    a = np.frombuffer(data, dtype=np.uint8)
    b = np.frombuffer(pad, dtype=np.uint8, count=len(data))
    return np.bitwise_xor(a, b).tobytes()


def sidecar_path(key_path) -> Path:
    key_path = Path(key_path)
    return key_path.with_name(key_path.name + ".used.json")


def consumed_ranges(key_path) -> list[tuple[int, int]]:
    side = sidecar_path(key_path)
    if not side.exists():
        return []
    return [tuple(r) for r in json.loads(side.read_text())["consumed"]]


def _record(key_path, start: int, stop: int) -> None:
    ranges = sorted(consumed_ranges(key_path) + [(start, stop)])
    sidecar_path(key_path).write_text(json.dumps({"consumed": [list(r) for r in ranges]}) + "\n")


def key_time_s(n_bytes: int, net_rate_bps: float) -> float:
    """Acquisition time of ``n_bytes`` of pad at a net key rate."""
    if net_rate_bps <= 0:
        raise ValueError("net rate must be positive")
    return 8.0 * n_bytes / net_rate_bps


def otp(mode: str, data_path, key_path, offset: int = 0, out_path=None) -> Path:
    """Encrypt or decrypt a file with the key bytes starting at ``offset``.

    Returns
    -------
    Path
        The written output (``<data>.otp`` or ``<data>.dec`` unless given).

    Raises
    ------
    KeyTooShort
        The key holds fewer than ``offset + len(data)`` bytes.
    KeyReused
        Encryption would touch key bytes an earlier encryption consumed.
    """
    if mode not in ("encrypt", "decrypt"):
        raise ValueError("mode must be encrypt or decrypt")
    if offset < 0:
        raise ValueError("offset must be non-negative")
    data = Path(data_path).read_bytes()
    key = Path(key_path).read_bytes()
    stop = offset + len(data)
    if stop > len(key):
        raise KeyTooShort(f"need key bytes [{offset}, {stop}) but the key has {len(key)}")
    if mode == "encrypt":
        for lo, hi in consumed_ranges(key_path):
            if offset < hi and lo < stop:
                raise KeyReused(f"key bytes [{lo}, {hi}) were already used")
    out = xor_bytes(data, key[offset:stop])
    if out_path is None:
        out_path = Path(str(data_path) + (".otp" if mode == "encrypt" else ".dec"))
    Path(out_path).write_bytes(out)
    if mode == "encrypt" and stop > offset:
        _record(key_path, offset, stop)
    return Path(out_path)
