import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import linalg

from qdqkd.protocol.postprocess import (QBER_ABORT, KeyBuffer, LeakageLedger, bias_correct, bias_mask,
                                        binary_entropy, confirm_tag, error_correct, first_block_size, gate,
                                        pa_length, pa_output_length, privacy_amplify, reconciliation_qber,
                                        sacrifice_indices, sacrifice_qber, sift, sift_records, toeplitz_seed)
from qdqkd.protocol.wire import (IndexMismatch, KeyExhausted, ProtocolViolation, ThresholdExceeded)


def toeplitz_oracle(key, seed, m):
    n = key.size
    t = linalg.toeplitz(seed[n - 1:n - 1 + m], seed[n - 1::-1])
    return (t.astype(np.int64) @ key.astype(np.int64)) % 2


def noisy_pair(n, q, seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 2, n, dtype=np.uint8)
    return a, a ^ (rng.random(n) < q).astype(np.uint8)


class TestSift:
    def test_keeps_matching_bases(self):
        key = sift([0, 1, 1, 0], [1, 0, 1, 1], [0, 0, 1, 1])
        np.testing.assert_array_equal(key.bits, [1, 1])
        np.testing.assert_array_equal(key.origin, [0, 2])

    def test_mismatch(self):
        with pytest.raises(IndexMismatch):
            sift([0, 1], [1, 1], [0])

    def test_records(self):
        recs = list(sift_records([0, 1], [1, 0], [0, 0]))
        assert recs[0].bit == 1 and recs[1].bit is None

    @given(n=st.integers(1, 500), seed=st.integers(0, 2**31))
    def test_both_sides_agree_on_positions(self, n, seed):
        rng = np.random.default_rng(seed)
        ba, bb = rng.integers(0, 2, n), rng.integers(0, 2, n)
        bits = rng.integers(0, 2, n)
        np.testing.assert_array_equal(sift(ba, bits, bb).origin, sift(bb, bits, ba).origin)


class TestSacrifice:
    def test_indices(self):
        idx = sacrifice_indices(1000, 0.1, 7)
        assert idx.size == 100 and (np.diff(idx) > 0).all()
        np.testing.assert_array_equal(idx, sacrifice_indices(1000, 0.1, 7))

    def test_rejects_fraction(self):
        with pytest.raises(ValueError):
            sacrifice_indices(10, 1.5, 0)

    def test_qber_and_removal(self):
        a, b = noisy_pair(10000, 0.05, 1)
        ka = KeyBuffer(a, np.arange(a.size))
        idx = sacrifice_indices(a.size, 0.1, 3)
        q, se, rest = sacrifice_qber(ka, b[idx], 0.1, 3)
        assert len(rest) == 9000
        assert abs(q - 0.05) < 5 * se
        assert not np.isin(rest.origin, idx).any()

    def test_wrong_size(self):
        with pytest.raises(ProtocolViolation):
            sacrifice_qber(KeyBuffer([0] * 100, np.arange(100)), [0], 0.1, 3)


class TestGate:
    @pytest.mark.parametrize("q,se", [(0.11, 0.0), (0.2, 0.0), (0.1, 0.004)])
    def test_aborts(self, q, se):
        with pytest.raises(ThresholdExceeded):
            gate(q, se)

    def test_passes(self):
        gate(0.1, 0.003)
        gate(0.02, 0.005)


class TestBias:
    def test_mask_half(self):
        assert bias_mask(1001, 3).sum() == 500

    def test_measured_bias_removed(self):
        rng = np.random.default_rng(2)
        n = 1_000_000
        bits = (rng.random(n) < 0.513).astype(np.uint8)
        out = bias_correct(KeyBuffer(bits, np.arange(n)), 11)
        assert abs(out.ones_fraction() - 0.5) < 5 * math.sqrt(0.25 / n)

    @given(n=st.integers(0, 2000), seed=st.integers(0, 2**63 - 1), s2=st.integers(0, 2**31))
    def test_xor_invariant(self, n, seed, s2):
        a, b = noisy_pair(n, 0.1, s2)
        ca = bias_correct(KeyBuffer(a, np.arange(n)), seed)
        cb = bias_correct(KeyBuffer(b, np.arange(n)), seed)
        np.testing.assert_array_equal(ca.bits ^ cb.bits, a ^ b)


class TestPrivacyAmplification:
    @pytest.mark.parametrize("n,q,l", [(10000, 0.02, 1045), (10000, 0.0191, 1004), (10000, 0.0, 0),
                                       (100, 0.25, 187)])
    def test_pa_length(self, n, q, l):
        assert pa_length(n, q) == l

    def test_pa_length_formula(self):
        for n, q in ((12345, 0.0123), (999, 0.05)):
            assert pa_length(n, q) == math.ceil(4 * n * q + 5 * math.sqrt(12 * n * q))

    def test_pa_rejects(self):
        with pytest.raises(ValueError):
            pa_length(-1, 0.1)

    def test_output_length(self):
        assert pa_output_length(10000, 0.02, 1500) == 10000 - 1045 - 1500 - 64

    @given(n=st.integers(1, 300), m=st.integers(1, 120), seed=st.integers(0, 2**31))
    @settings(max_examples=60)
    def test_against_dense_oracle(self, n, m, seed):
        rng = np.random.default_rng(seed)
        key = rng.integers(0, 2, n, dtype=np.uint8)
        s = toeplitz_seed(n, m, seed)
        np.testing.assert_array_equal(privacy_amplify(key, m, s), toeplitz_oracle(key, s, m))

    @given(seed=st.integers(0, 2**31))
    @settings(max_examples=20)
    def test_linear(self, seed):
        rng = np.random.default_rng(seed)
        x, y = rng.integers(0, 2, (2, 500), dtype=np.uint8)
        s = toeplitz_seed(500, 100, seed)
        np.testing.assert_array_equal(privacy_amplify(x ^ y, 100, s),
                                      privacy_amplify(x, 100, s) ^ privacy_amplify(y, 100, s))

    def test_exhausted(self):
        with pytest.raises(KeyExhausted):
            privacy_amplify(np.ones(10, np.uint8), 0, np.zeros(9, np.uint8))

    def test_seed_length(self):
        with pytest.raises(ValueError):
            privacy_amplify(np.ones(10, np.uint8), 3, np.zeros(5, np.uint8))


class TestCascade:
    def test_block_size(self):
        assert first_block_size(0.02, 10000) == 37
        assert first_block_size(0.0, 10000) == 730
        with pytest.raises(ThresholdExceeded):
            first_block_size(QBER_ABORT, 100)

    @given(n=st.integers(200, 6000), q=st.floats(0.0, 0.08), seed=st.integers(0, 2**31))
    @settings(max_examples=40)
    def test_reconciles(self, n, q, seed):
        a, b = noisy_pair(n, q, seed)
        realized = float(np.mean(a != b))
        res = error_correct(a, b, reconciliation_qber(realized, n // 10), perm_seed=seed)
        np.testing.assert_array_equal(res.bits, a)
        assert res.corrected == int(np.count_nonzero(a != b))

    def test_leakage_near_shannon(self):
        ratios = []
        for seed in range(20):
            a, b = noisy_pair(20000, 0.02, seed)
            realized = float(np.mean(a != b))
            res = error_correct(a, b, realized, perm_seed=seed)
            np.testing.assert_array_equal(res.bits, a)
            ratios.append(res.parity_bits / (a.size * binary_entropy(realized)))
        assert 1.0 <= min(ratios) and max(ratios) <= 1.7

    def test_length_mismatch(self):
        with pytest.raises(IndexMismatch):
            error_correct(np.zeros(5, np.uint8), np.zeros(6, np.uint8), 0.01, 0)


class TestReconciliationQber:
    def test_zero_observed(self):
        # no errors in 300 sampled bits still allows about 2 sqrt(1/300)/sqrt(300)
        assert reconciliation_qber(0.0, 300) == pytest.approx(2 / 300, rel=1e-12)

    def test_capped(self):
        assert reconciliation_qber(0.10, 50) == pytest.approx(0.95 * QBER_ABORT)

    def test_no_sample(self):
        assert reconciliation_qber(0.0, 0) == 1e-3

    @given(q=st.floats(0, 0.1), n=st.integers(1, 10**6))
    def test_upper_bound(self, q, n):
        assert reconciliation_qber(q, n) >= min(q, 0.95 * QBER_ABORT)


class TestTagsAndLedger:
    def test_tag_detects_single_flip(self):
        rng = np.random.default_rng(0)
        bits = rng.integers(0, 2, 4000, dtype=np.uint8)
        other = bits.copy()
        other[1234] ^= 1
        assert confirm_tag(bits, 5, 0) == confirm_tag(bits.copy(), 5, 0)
        assert confirm_tag(bits, 5, 0) != confirm_tag(other, 5, 0)
        assert 0 <= confirm_tag(bits, 5, 0) < 2**64

    def test_monotone(self):
        ledger = LeakageLedger()
        ledger.add_sacrificed(10)
        ledger.add_parities(5)
        ledger.add_confirm()
        ledger.set_pa_bound(40)
        d = ledger.to_dict()
        assert (d["sacrificed_bits"], d["parity_bits_disclosed"], d["confirm_bits"], d["pa_bound_l"]) == \
            (10, 5, 64, 40)
        with pytest.raises(ValueError):
            ledger.add_parities(-1)
        with pytest.raises(ValueError):
            ledger.set_pa_bound(39)

    def test_key_buffer_shape(self):
        with pytest.raises(ValueError):
            KeyBuffer([0, 1], [0])

    def test_entropy(self):
        assert binary_entropy(0.5) == pytest.approx(1.0)
        assert binary_entropy(0.0) == 0.0
        assert binary_entropy(0.11) == pytest.approx(0.4999, abs=1e-4)
