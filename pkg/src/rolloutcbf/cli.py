"""Command-line entry point: run simulations, audit assumptions, summarize logs.

Exit codes: 0 success, 1 configuration error, 2 runtime abort.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import ConfigError, SafetyModelError, SimAbort
from .sim import SimLog, audit_assumptions, bundle_from_config, metrics, run_sim
from .simconfig import MODES, load_config

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def _print_metrics(summary: dict) -> None:
    width = max(len(k) for k in summary)
    for key, val in summary.items():
        print(f"  {key:<{width}}  {val}")
    for key, val in summary.items():
        print(f"{key}={val}")


def cmd_run(args) -> int:
    config = load_config(args.config)
    if args.mode:
        if args.mode not in MODES:
            raise ConfigError(f"--mode must be one of {MODES}")
        config.raw["sim"]["mode"] = args.mode
    if args.duration is not None:
        if args.duration <= 0:
            raise ConfigError("--duration must be > 0")
        config.raw["sim"]["duration"] = args.duration
    log_path = args.out if args.out is not None else None
    bundle = bundle_from_config(config)
    sim_log = run_sim(config, bundle=bundle, log_path=log_path)
    out = log_path if log_path is not None else config.raw["output"]["log_path"]
    print(f"wrote {len(sim_log)} rows to {out} "
          f"(mode={config.raw['sim']['mode']})")
    _print_metrics(metrics(sim_log, bundle))
    return EXIT_OK


def cmd_audit(args) -> int:
    config = load_config(args.config)
    report = audit_assumptions(config, sample_count=args.samples)
    _print_metrics(report)
    return EXIT_OK if report["passed"] else EXIT_RUNTIME


def cmd_metrics(args) -> int:
    sim_log = SimLog.from_csv(args.log)
    bundle = None
    if args.config:
        bundle = bundle_from_config(load_config(args.config))
    _print_metrics(metrics(sim_log, bundle))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rolloutcbf",
        description="Rollout-barrier safety filter simulations",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a closed-loop simulation")
    p_run.add_argument("config", help="TOML configuration file")
    p_run.add_argument("--mode", choices=MODES, default=None,
                       help="override sim.mode")
    p_run.add_argument("--out", default=None, help="override output.log_path")
    p_run.add_argument("--duration", type=float, default=None,
                       help="override sim.duration (seconds)")
    p_run.set_defaults(fn=cmd_run)

    p_audit = sub.add_parser("audit", help="sample-based assumption audit")
    p_audit.add_argument("config", help="TOML configuration file")
    p_audit.add_argument("--samples", type=int, default=100_000)
    p_audit.set_defaults(fn=cmd_audit)

    p_metrics = sub.add_parser("metrics", help="summarize an existing log")
    p_metrics.add_argument("log", help="CSV log file")
    p_metrics.add_argument("--config", default=None,
                           help="config for input-bound checks (optional)")
    p_metrics.set_defaults(fn=cmd_metrics)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimAbort as exc:
        print(f"runtime abort: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except SafetyModelError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
