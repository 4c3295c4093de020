"""Command line entry point (``qdqkd``)."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

import numpy as np

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PROTOCOL = 3
EXIT_ANALYSIS = 4


def _dump(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=float))


def cmd_run(args) -> int:
    from .scenario import expected_rates, load_config, run_scenario

    cfg = load_config(args.config)
    result = run_scenario(cfg, args.out)
    report = dict(result.report)
    if args.expected:
        report["expected"] = expected_rates(cfg, result.pc_angles)
    _dump(report)
    return EXIT_OK


def cmd_optimize_pc(args) -> int:
    from .scenario import choose_pc_angles, load_config

    cfg = load_config(args.config)
    if cfg.pc.mode != "optimize":
        cfg = cfg.replace(pc=dataclasses.replace(cfg.pc, mode="optimize"))
    angles, info = choose_pc_angles(cfg, exact=args.exact)
    _dump({"angles_rad": list(angles.theta), **info})
    return EXIT_OK


def cmd_tomo(args) -> int:
    from .channel import apply_channel
    from .polarization import fidelity
    from .scenario import choose_pc_angles, load_config, pc_matrix, source_state
    from .sync import simulate_tomography_counts, tomography

    cfg = load_config(args.config)
    angles, _ = choose_pc_angles(cfg, exact=True)
    rho = apply_channel(source_state(cfg), cfg.fiber_a.to_params(), cfg.fiber_b.to_params(),
                        cfg.t2_ps, extra_b=pc_matrix(cfg, angles))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seeds.physics, 0x70]))
    counts = simulate_tomography_counts(rho, args.pairs, rng)
    est = tomography(counts)
    _dump({"pairs": args.pairs, "fidelity_model": fidelity(rho), "fidelity_reconstructed": fidelity(est)})
    return EXIT_OK


def cmd_otp(args) -> int:
    from .otp import otp

    out = otp(args.mode, args.data, args.key, args.offset, args.out)
    print(out)
    return EXIT_OK


def cmd_compare_sources(args) -> int:
    from .scenario import load_config
    from .source import source_comparison

    cfg = load_config(args.config)
    _dump(source_comparison(cfg.source, args.epsilon_spdc))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qdqkd", description="Entanglement-based QKD simulator.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate a scenario and distil keys")
    r.add_argument("--config", required=True)
    r.add_argument("--out", default=None, help="directory for CSV, keys, transcripts and report")
    r.add_argument("--expected", action="store_true", help="append the analytic budget")
    r.set_defaults(func=cmd_run)

    o = sub.add_parser("optimize-pc", help="run the polarization controller search")
    o.add_argument("--config", required=True)
    o.add_argument("--exact", action="store_true", help="noiseless evaluator instead of sampled counts")
    o.set_defaults(func=cmd_optimize_pc)

    t = sub.add_parser("tomo", help="Monte Carlo state tomography of the distributed state")
    t.add_argument("--config", required=True)
    t.add_argument("--pairs", type=int, default=1_000_000)
    t.set_defaults(func=cmd_tomo)

    x = sub.add_parser("otp", help="one-time-pad a file with distilled key")
    x.add_argument("mode", choices=("encrypt", "decrypt"))
    x.add_argument("--data", required=True)
    x.add_argument("--key", required=True)
    x.add_argument("--offset", type=int, default=0, help="first key byte to use")
    x.add_argument("--out", default=None)
    x.set_defaults(func=cmd_otp)

    c = sub.add_parser("compare-sources", help="quantum dot versus SPDC pair source")
    c.add_argument("--config", required=True)
    c.add_argument("--epsilon-spdc", type=float, default=0.01)
    c.set_defaults(func=cmd_compare_sources)
    return p


def main(argv=None) -> int:
    from .controller import NotConverged
    from .otp import OtpError
    from .protocol.wire import ProtocolError
    from .scenario import ConfigError, ScenarioAborted
    from .sync import AnalysisError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ScenarioAborted as exc:
        print(f"aborted in {exc}", file=sys.stderr)
        return EXIT_PROTOCOL if isinstance(exc.cause, ProtocolError) else EXIT_ANALYSIS
    except ProtocolError as exc:
        print(f"protocol abort: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (AnalysisError, NotConverged) as exc:
        print(f"analysis error: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS
    except (OtpError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
