import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import HealthCheck
from hypothesis import strategies as st

from qdqkd.otp import KeyReused, KeyTooShort, consumed_ranges, key_time_s, otp, sidecar_path, xor_bytes


def write(path, data):
    path.write_bytes(data)
    return path


@pytest.fixture
def key(tmp_path):
    return write(tmp_path / "key.bin", np.random.default_rng(1).bytes(40_000))


class TestRoundTrip:
    @given(data=st.binary(max_size=2000), offset=st.integers(0, 1000))
    @settings(suppress_health_check=[HealthCheck.function_scoped_fixture])
    def test_bytes(self, data, offset):
        pad = np.random.default_rng(offset).bytes(3000)
        assert xor_bytes(xor_bytes(data, pad[offset:]), pad[offset:]) == data

    def test_bitmap_sized_file(self, tmp_path, key):
        data = np.random.default_rng(2).bytes(29_200)
        src = write(tmp_path / "image.bmp", data)
        enc = otp("encrypt", src, key)
        assert enc.read_bytes() != data
        dec = otp("decrypt", enc, key, out_path=tmp_path / "back.bmp")
        assert dec.read_bytes() == data
        assert consumed_ranges(key) == [(0, 29_200)]

    def test_empty_payload(self, tmp_path, key):
        enc = otp("encrypt", write(tmp_path / "e", b""), key)
        assert enc.read_bytes() == b""
        assert consumed_ranges(key) == []

    def test_corrupted_key_is_local(self, tmp_path, key):
        data = bytes(range(256)) * 10
        enc = otp("encrypt", write(tmp_path / "m", data), key)
        bad = bytearray(key.read_bytes())
        bad[100] ^= 0x10
        bad_key = write(tmp_path / "bad.bin", bytes(bad))
        dec = otp("decrypt", enc, bad_key).read_bytes()
        diff = [i for i, (a, b) in enumerate(zip(dec, data)) if a != b]
        assert diff == [100]
        assert dec[100] ^ data[100] == 0x10


class TestKeyManagement:
    def test_reuse_rejected(self, tmp_path, key):
        otp("encrypt", write(tmp_path / "a", b"x" * 100), key)
        with pytest.raises(KeyReused):
            otp("encrypt", write(tmp_path / "b", b"y" * 10), key, offset=50)
        otp("encrypt", write(tmp_path / "c", b"z" * 10), key, offset=100)
        assert consumed_ranges(key) == [(0, 100), (100, 110)]
        assert json.loads(sidecar_path(key).read_text())["consumed"] == [[0, 100], [100, 110]]

    def test_decrypt_does_not_consume(self, tmp_path, key):
        otp("decrypt", write(tmp_path / "a", b"x" * 10), key)
        assert not sidecar_path(key).exists()

    def test_too_short(self, tmp_path, key):
        with pytest.raises(KeyTooShort):
            otp("encrypt", write(tmp_path / "a", b"x" * 10), key, offset=39_995)
        with pytest.raises(KeyTooShort):
            xor_bytes(b"abc", b"a")

    @pytest.mark.parametrize("kw", [{"mode": "sign"}, {"offset": -1}])
    def test_rejects(self, tmp_path, key, kw):
        args = {"mode": "encrypt", "offset": 0, **kw}
        with pytest.raises(ValueError):
            otp(args["mode"], write(tmp_path / "a", b"x"), key, args["offset"])


class TestKeyTime:
    def test_bitmap_at_net_rate(self):
        assert key_time_s(29_200, 86.0) / 60 == pytest.approx(45.27, abs=0.01)

    def test_rejects_zero_rate(self):
        with pytest.raises(ValueError):
            key_time_s(1, 0.0)
