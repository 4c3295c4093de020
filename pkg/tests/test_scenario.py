import dataclasses
import json
import math

import numpy as np
import pytest

from qdqkd import cli
from qdqkd.channel import transmission
from qdqkd.detection import AnalyzerParams
from qdqkd.polarization import HBAR_NEV_NS
from qdqkd.protocol.postprocess import SAFETY_MARGIN, TAG_BITS
from qdqkd.scenario import (ConfigError, FiberSpec, ScenarioConfig, expected_rates, load_config,
                            run_scenario, save_config, window_statistics)
from qdqkd.source import QdSourceParams
from qdqkd.sync import QBER_CSV_COLUMNS


@pytest.fixture(scope="module")
def zero_noise(zero_noise_config_path, tmp_path_factory):
    out = tmp_path_factory.mktemp("zero")
    cfg = load_config(zero_noise_config_path)
    return cfg, run_scenario(cfg, out), out


def write_json(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return p


class TestConfig:
    def test_round_trip(self, calibrated_config_path, tmp_path):
        cfg = load_config(calibrated_config_path)
        save_config(cfg, tmp_path / "again.json")
        assert load_config(tmp_path / "again.json") == cfg
        assert cfg.to_dict() == json.loads(calibrated_config_path.read_text())

    def test_defaults_fill_in(self, tmp_path):
        cfg = load_config(write_json(tmp_path, {"duration_s": 20}))
        assert cfg == ScenarioConfig(duration_s=20.0)

    @pytest.mark.parametrize("data,path", [
        ({"fiber_b": {"lenght_km": 1.0}}, "fiber_b.lenght_km"),
        ({"window_ps": "wide"}, "window_ps"),
        ({"window_ps": 1.5}, "window_ps"),
        ({"analyzer_a": {"efficiency": [1, 1]}}, "analyzer_a.efficiency"),
        ({"pc": {"mode": "auto"}}, "pc"),
        ({"coupling_efficiency_a": 1.5}, ""),
        ({"seeds": []}, "seeds"),
        ({"protocol": {"gate_z": True}}, "protocol.gate_z"),
    ])
    def test_errors_name_the_field(self, tmp_path, data, path):
        with pytest.raises(ConfigError) as info:
            load_config(write_json(tmp_path, data))
        assert info.value.path == path

    def test_unreadable(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "missing.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{")
        with pytest.raises(ConfigError):
            load_config(bad)

    def test_fiber_axis_normalized(self):
        f = FiberSpec(rotation_axis=(0.0, 3.0, 4.0))
        assert f.rotation_axis == pytest.approx((0.0, 0.6, 0.8))

    def test_session_ids_per_segment(self):
        cfg = ScenarioConfig()
        assert [cfg.session_config(k).session_id for k in range(3)] == [1, 2, 3]


class TestExpectedRates:
    def ideal(self, **kw):
        lossless = FiberSpec(length_km=0.0, attenuation_db_per_km=0.0)
        an = AnalyzerParams(jitter_sigma_ps=0.0, dead_time_ps=0.0)
        return ScenarioConfig(source=QdSourceParams(epsilon_pair=1.0, eta_extraction=1.0, **kw),
                              fiber_a=lossless, fiber_b=lossless, analyzer_a=an, analyzer_b=an,
                              window_ps=10_000, track_window_ps=10_000, pc=dataclasses.replace(
                                  ScenarioConfig().pc, mode="off"))

    def test_every_pulse_gives_a_sifted_bit_half_the_time(self):
        r = expected_rates(self.ideal())
        assert r["raw_rate_bps"] == pytest.approx(80e6, rel=1e-6)
        assert r["sifted_rate_bps"] == pytest.approx(40e6, rel=1e-6)
        assert r["accidental_rate_bps"] == 0.0

    def test_full_capture_coherence(self):
        cfg = self.ideal(s_nev=390.0)
        c = 1.0 / (1.0 + 1j * 390.0 * 0.25 / HBAR_NEV_NS)
        got = complex(*expected_rates(cfg)["window_coherence"])
        assert abs(got - c) < 1e-6

    def test_narrow_window_raises_coherence(self):
        cfg = self.ideal(s_nev=390.0)
        wide = abs(window_statistics(cfg)["coherence"])
        narrow = abs(window_statistics(cfg.replace(window_ps=200, track_window_ps=200))["coherence"])
        assert narrow > wide

    def test_doubling_fiber(self):
        base = ScenarioConfig(pc=dataclasses.replace(ScenarioConfig().pc, mode="off"))
        longer = base.replace(fiber_b=dataclasses.replace(base.fiber_b, length_km=0.7))
        ratio = expected_rates(longer)["eta_b"] / expected_rates(base)["eta_b"]
        assert ratio == pytest.approx(transmission(0.35, 3.0), rel=1e-12)
        assert ratio == pytest.approx(0.7852, abs=1e-4)

    def test_dark_only_accidentals(self):
        an = AnalyzerParams(dark_rate_hz=(1000.0,) * 4)
        cfg = ScenarioConfig(coupling_efficiency_a=0.0, coupling_efficiency_b=0.0, analyzer_a=an,
                             analyzer_b=an, pc=dataclasses.replace(ScenarioConfig().pc, mode="off"))
        r = expected_rates(cfg)
        assert r["accidental_rate_bps"] == pytest.approx(4000.0 * 4000.0 * 1e-9)
        assert r["qber"] == pytest.approx(0.5)

    def test_calibrated_budget(self, calibrated_config_path):
        r = expected_rates(load_config(calibrated_config_path))
        assert r["key_rate_bps"] == pytest.approx(135.0, rel=1e-3)
        assert r["g2_x"] == pytest.approx(0.021, rel=1e-3)
        assert 0.015 <= r["qber"] <= 0.025


class TestZeroNoise:
    def test_no_errors(self, zero_noise):
        _, res, _ = zero_noise
        assert res.report["qber_all_sifted"] == 0.0
        assert res.report["keys_identical"]
        np.testing.assert_array_equal(res.key_alice, res.key_bob)
        assert res.key_alice.size == res.report["final_key_bits"]

    def test_net_rate_identity(self, zero_noise):
        cfg, res, _ = zero_noise
        for seg in res.segments:
            assert seg.final_bits == seg.key_bits - seg.parity_bits - SAFETY_MARGIN
        total = sum(s.final_bits for s in res.segments)
        assert res.report["net_rate_bps"] == pytest.approx(total / cfg.duration_s)
        assert res.report["ledger"]["confirm_bits"] == TAG_BITS * len(res.segments)

    def test_raw_rate_matches_budget(self, zero_noise):
        cfg, res, _ = zero_noise
        expected = expected_rates(cfg)["raw_rate_bps"]
        n = res.report["coincidences"]
        assert abs(n - expected * cfg.duration_s) < 5 * math.sqrt(expected * cfg.duration_s)

    def test_csv_rates_weight_to_report(self, zero_noise):
        cfg, res, _ = zero_noise
        rows = res.csv_rows()
        spans = np.diff([0.0] + [r[0] for r in rows])
        assert sum(r[3] * dt for r, dt in zip(rows, spans)) == pytest.approx(res.report["coincidences"])

    def test_short_last_segment_rate(self, zero_noise):
        cfg, _, _ = zero_noise
        res = run_scenario(cfg.replace(duration_s=cfg.segment_s * 1.5))
        last = res.csv_rows()[-1]
        assert last[3] == pytest.approx(res.segments[-1].coincidences / (cfg.segment_s / 2))

    def test_no_accidentals(self, zero_noise):
        _, res, _ = zero_noise
        assert res.report["coincidences"] == res.report["true_coincidences"]

    def test_bundle(self, zero_noise):
        _, res, out = zero_noise
        names = {p.name for p in out.iterdir()}
        assert {"qber.csv", "key_alice.bin", "key_bob.bin", "transcript_alice.bin", "transcript_bob.bin",
                "report.json"} <= names
        assert (out / "qber.csv").read_text().splitlines()[0] == ",".join(QBER_CSV_COLUMNS)
        assert (out / "key_alice.bin").read_bytes() == (out / "key_bob.bin").read_bytes()
        assert len((out / "qber.csv").read_text().splitlines()) == 1 + len(res.segments)

    def test_deterministic(self, zero_noise, tmp_path):
        cfg, _, out = zero_noise
        run_scenario(cfg, tmp_path)
        for name in ("qber.csv", "key_alice.bin", "key_bob.bin", "transcript_alice.bin",
                     "transcript_bob.bin", "report.json"):
            assert (tmp_path / name).read_bytes() == (out / name).read_bytes(), name

    def test_seed_matters(self, zero_noise):
        cfg, res, _ = zero_noise
        other = run_scenario(cfg.replace(seeds=dataclasses.replace(cfg.seeds, physics=99),
                                         duration_s=10.0))
        assert not np.array_equal(other.key_alice[:100], res.key_alice[:100])


class TestCalibrated:
    def test_short_run(self, calibrated_config_path):
        cfg = load_config(calibrated_config_path).replace(duration_s=20.0)
        res = run_scenario(cfg)
        exp = expected_rates(cfg, res.pc_angles)
        assert res.report["keys_identical"]
        assert res.report["raw_rate_bps"] == pytest.approx(exp["raw_rate_bps"], rel=0.05)
        n = res.report["sifted_bits"]
        se = math.sqrt(exp["qber"] * (1 - exp["qber"]) / n)
        assert abs(res.report["qber_all_sifted"] - exp["qber"]) < 5 * se
        assert abs(res.report["delay_drift_ppm"] - cfg.clock_b.drift_ppm) < 5e-4


class TestCli:
    def test_run(self, zero_noise_config_path, tmp_path, capsys):
        assert cli.main(["run", "--config", str(zero_noise_config_path), "--out", str(tmp_path),
                         "--expected"]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["keys_identical"] and "expected" in report
        assert (tmp_path / "report.json").exists()

    def test_config_error(self, tmp_path, capsys):
        assert cli.main(["run", "--config", str(write_json(tmp_path, {"bogus": 1}))]) == cli.EXIT_CONFIG
        assert "bogus" in capsys.readouterr().err
        assert cli.main(["run", "--config", str(tmp_path / "nope.json")]) == cli.EXIT_CONFIG

    def test_protocol_abort(self, zero_noise_config_path, tmp_path):
        data = json.loads(zero_noise_config_path.read_text())
        data["source"].update(g2_x=0.5, g2_xx=0.5)
        data["duration_s"] = 10.0
        assert cli.main(["run", "--config", str(write_json(tmp_path, data))]) == cli.EXIT_PROTOCOL

    def test_analysis_abort(self, zero_noise_config_path, tmp_path):
        data = json.loads(zero_noise_config_path.read_text())
        data["source"].update(g2_x=1.0, g2_xx=1.0)
        data["duration_s"] = 10.0
        assert cli.main(["run", "--config", str(write_json(tmp_path, data))]) == cli.EXIT_ANALYSIS

    def test_compare_sources(self, calibrated_config_path, capsys):
        assert cli.main(["compare-sources", "--config", str(calibrated_config_path)]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["spdc"]["g2_zero"] == 0.01

    def test_optimize_pc_exact(self, calibrated_config_path, capsys):
        assert cli.main(["optimize-pc", "--config", str(calibrated_config_path), "--exact"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert len(out["angles_rad"]) == 3

    def test_tomo(self, calibrated_config_path, capsys):
        assert cli.main(["tomo", "--config", str(calibrated_config_path), "--pairs", "200000"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert abs(out["fidelity_reconstructed"] - out["fidelity_model"]) < 0.02

    def test_otp_errors(self, tmp_path):
        (tmp_path / "d").write_bytes(b"hello")
        (tmp_path / "k").write_bytes(b"ab")
        assert cli.main(["otp", "encrypt", "--data", str(tmp_path / "d"), "--key", str(tmp_path / "k")]) == 2
