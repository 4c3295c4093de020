import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qdqkd.polarization import STATES, bell_phi_plus, dm, fidelity, model_state
from qdqkd.sync import (QBER_CSV_COLUMNS, DelayEstimate, DelayTracker, EmptySample, InsufficientData,
                        NoPeak, SingularFrame, find_delay, g2_autocorrelation, g2_from_areas, g2_peak_areas,
                        match_coincidences,
                        qber_estimate, simulate_tomography_counts, tomography, tomography_probabilities,
                        write_qber_csv)

from streams import correlated_streams, poisson_stream


def truth(t_a, offset, drift_ppm):
    return offset + drift_ppm * 1e-6 * np.asarray(t_a, dtype=float)


class TestFindDelay:
    def test_known_offset(self):
        a, b = correlated_streams(20000, 1_234_567, seed=1)
        est = find_delay(a, b)
        assert abs(est.offset_at(a.timestamp[0]) - 1_234_567) < 50

    @pytest.mark.parametrize("offset", [10**12, -10**12])
    def test_large_offset_with_drift(self, offset):
        a, b = correlated_streams(100_000, offset, drift_ppm=10.0, seed=2, t0_ps=2 * 10**12)
        est = find_delay(a, b, max_drift_ppm=20.0)
        probe = a.timestamp[[0, a.timestamp.size // 2, -1]]
        assert np.abs(est.offset_at(probe) - truth(probe, offset, 10.0)).max() < 50
        assert est.drift_ppm == pytest.approx(10.0, abs=0.05)

    def test_with_background(self):
        a, b = correlated_streams(60_000, -7_654_321, seed=3, background_hz=2e5)
        est = find_delay(a, b)
        assert abs(est.offset_at(a.timestamp[0]) + 7_654_321) < 50

    @given(shift=st.integers(-10**9, 10**9))
    @settings(max_examples=10)
    def test_shift_invariance(self, shift):
        a, b = correlated_streams(20000, 3_000_000, seed=4)
        base = find_delay(a, b).offset_at(a.timestamp[0])
        moved = find_delay(a, b.shifted(shift)).offset_at(a.timestamp[0])
        assert abs(moved - base - shift) < 50

    def test_uncorrelated_streams(self):
        a = poisson_stream(1e5, 0.5, seed=5)
        b = poisson_stream(1e5, 0.5, seed=6, node=1)
        with pytest.raises(NoPeak):
            find_delay(a, b)

    def test_empty(self):
        a, _ = correlated_streams(100, 0)
        with pytest.raises(InsufficientData):
            find_delay(a, a.select(np.zeros(len(a), bool)))


class TestDelayEstimate:
    @given(off=st.floats(-1e12, 1e12), drift=st.floats(-2e-5, 2e-5), t=st.integers(0, 10**13))
    def test_to_a_frame_inverts(self, off, drift, t):
        est = DelayEstimate(off, drift, 0)
        tb = np.array([int(round(t + est.offset_at(t)))])
        assert abs(int(est.to_a_frame(tb)[0]) - t) <= 2


class TestMatching:
    def test_window_boundary(self):
        a = correlated_streams(1, 0)[0]
        for dt, hit in ((500, True), (-500, True), (501, False), (-501, False)):
            b = a.shifted(dt)
            assert len(match_coincidences(a, b, 0.0, window=1000)) == int(hit)

    def test_monotone_in_window(self):
        a, b = correlated_streams(5000, 0, seed=7, background_hz=5e5, jitter_ps=300)
        counts = [len(match_coincidences(a, b, 0.0, w)) for w in (200, 500, 1000, 2000, 4000)]
        assert counts == sorted(counts)

    def test_pairs_recovered(self):
        a, b = correlated_streams(5000, 2_000_000, seed=8)
        m = match_coincidences(a, b, 2_000_000.0, 1000)
        assert len(m) == 5000
        assert np.abs(m.delta).max() <= 500


class TestG2:
    period = 12_500

    def pulsed(self, rate_per_pulse, n_pulses, seed):
        rng = np.random.default_rng(seed)
        k = rng.poisson(rate_per_pulse, n_pulses)
        return np.repeat(np.arange(n_pulses, dtype=np.int64) * self.period, k) + rng.integers(-50, 50, k.sum())

    def test_poisson_unity(self):
        a1 = np.sort(self.pulsed(0.01, 2_000_000, 1))
        a2 = np.sort(self.pulsed(0.01, 2_000_000, 2))
        g2, err = g2_autocorrelation(a1, a2, self.period)
        assert abs(g2 - 1) < 5 * err

    def test_halving_keeps_g2(self):
        a1 = np.sort(self.pulsed(0.02, 2_000_000, 3))
        a2 = np.sort(self.pulsed(0.02, 2_000_000, 4))
        rng = np.random.default_rng(5)
        g_full, e_full = g2_autocorrelation(a1, a2, self.period)
        g_half, e_half = g2_autocorrelation(a1[rng.random(a1.size) < 0.5], a2[rng.random(a2.size) < 0.5],
                                            self.period)
        assert abs(g_full - g_half) < 5 * math.hypot(e_full, e_half)

    def test_single_photon_source(self):
        rng = np.random.default_rng(6)
        emit = np.flatnonzero(rng.random(2_000_000) < 0.05).astype(np.int64) * self.period
        arm = rng.random(emit.size) < 0.5
        g2, _ = g2_autocorrelation(emit[arm], emit[~arm], self.period)
        assert g2 == 0.0

    def test_too_short(self):
        with pytest.raises(InsufficientData):
            g2_autocorrelation(np.array([0]), np.array([10]), self.period)


class TestQber:
    def test_empty(self):
        with pytest.raises(EmptySample):
            qber_estimate([], [])

    def test_all_agree(self):
        assert qber_estimate([0, 1, 1], [0, 1, 1]) == (0.0, 0.0)

    def test_half(self):
        q, se = qber_estimate([0, 0, 1, 1], [0, 1, 1, 0])
        assert q == 0.5 and se == pytest.approx(0.25)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            qber_estimate([0], [0, 1])


class TestTomography:
    def test_exact_phi_plus(self):
        rho = dm(bell_phi_plus())
        np.testing.assert_allclose(tomography(tomography_probabilities(rho)), rho, atol=1e-9)

    def test_exact_model(self):
        rho = model_state(390.0, 0.25, 0.017, 0.025)
        assert fidelity(tomography(tomography_probabilities(rho))) == pytest.approx(0.97374, abs=1e-5)

    def test_hvrd_frame_is_enough(self):
        rho = model_state(390.0, 0.25, 0.017, 0.025)
        p = tomography_probabilities(rho)
        frame = {(a, b): p[(a, b)] for a in "HVDR" for b in "HVDR"}
        np.testing.assert_allclose(tomography(frame), rho, atol=1e-9)

    def test_hvda_frame_singular(self):
        p = tomography_probabilities(dm(bell_phi_plus()))
        with pytest.raises(SingularFrame):
            tomography({(a, b): p[(a, b)] for a in "HVDA" for b in "HVDA"})

    def test_sampled(self):
        rho = model_state(390.0, 0.25, 0.017, 0.025)
        counts = simulate_tomography_counts(rho, 1_000_000, np.random.default_rng(9))
        assert sum(counts.values()) == 1_000_000
        assert abs(fidelity(tomography(counts)) - fidelity(rho)) < 0.01

    def test_settings_known(self):
        assert set(STATES) >= set("HVDARL")


class TestTracker:
    def test_follows_drift(self):
        # disciplined clocks: a few ns of walk over ten seconds, starting 300 ps off
        offset, drift = 5_000_000, 0.002
        a, b = correlated_streams(200_000, offset, drift_ppm=drift, seed=10, rate_hz=2e4)
        tracker = DelayTracker(DelayEstimate(offset + 300, 0.0, 0), fraction=0.2, seed=1)
        edges = np.linspace(a.timestamp[0], a.timestamp[-1], 11)
        for lo, hi in zip(edges[:-1], edges[1:]):
            m = match_coincidences(a, b, tracker.estimate, window=8000)
            sel = (a.timestamp[m.ia] >= lo) & (a.timestamp[m.ia] < hi)
            tracker.update(a.timestamp[m.ia][sel], m.delta[sel])
        t_end = a.timestamp[-1]
        assert abs(tracker.estimate.offset_at(t_end) - truth(t_end, offset, drift)) < 50
        assert tracker.estimate.drift_ppm == pytest.approx(drift, abs=5e-4)
        assert len(tracker.history) == 11

    def test_small_sample_no_move(self):
        est = DelayEstimate(10.0)
        tr = DelayTracker(est, fraction=1.0)
        assert tr.update(np.arange(3), np.array([100.0, 100.0, 100.0])) is est

    def test_rejects_fraction(self):
        with pytest.raises(ValueError):
            DelayTracker(DelayEstimate(0.0), fraction=0.0)


class TestCsv:
    def test_golden_header(self, tmp_path):
        path = tmp_path / "q.csv"
        write_qber_csv(path, [(10.0, 0.02, 0.003, 300.0)])
        lines = path.read_text().splitlines()
        assert lines[0] == "t_s,qber,stderr,raw_rate_bps"
        assert tuple(next(csv.reader([lines[0]]))) == QBER_CSV_COLUMNS
        assert lines[1] == "10.000,0.020000,0.003000,300.000"


class TestG2Areas:
    def test_summed_areas(self):
        rng = np.random.default_rng(12)
        parts = []
        for k in range(3):
            t = np.sort(rng.integers(0, 10**10, 40_000)) + k * 10**10
            parts.append((t[::2], t[1::2]))
        total = sum(g2_peak_areas(a, b, 12_500) for a, b in parts)
        whole = g2_peak_areas(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]),
                              12_500)
        # only pairs straddling a stretch boundary differ
        assert np.abs(total - whole).max() <= 5
        assert g2_from_areas(total)[0] == pytest.approx(g2_from_areas(whole)[0], abs=0.02)

    def test_zero_side(self):
        with pytest.raises(InsufficientData):
            g2_from_areas(np.zeros(21))
