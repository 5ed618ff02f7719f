"""Command-line entry point: ``prekeysim <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .attacker import Attacker
from .scenario import (
    RunReport,
    ScenarioValidationError,
    StepResult,
    build_world,
    fixture_scenario,
    load_scenario,
    resolve_seed,
    run_scenario,
    run_step,
    write_outputs,
)
from .server import ServerError
from .simnet import ScenarioError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits with 2 already; keep the message format
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    def add_globals(p: argparse.ArgumentParser, default) -> None:
        p.add_argument("--scenario", type=Path, default=default, help="scenario file providing the simulated world")
        p.add_argument("--seed", type=int, default=default,
                       help="master seed (default: scenario seed, then $PREKEYSIM_SEED, then 0)")
        p.add_argument("--out", type=Path, default=default,
                       help="directory for report.json, CSVs, timeline and channel log")

    parser = _Parser(prog="prekeysim", description="Simulate prekey depletion attacks against an E2EE messenger.")
    add_globals(parser, None)
    # global options are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    add_globals(common, argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _add = sub.add_parser
    sub.add_parser = lambda name, **kw: _add(name, parents=[common], **kw)

    p = sub.add_parser("deplete", help="drain a device's one-time prekeys")
    p.add_argument("--target", required=True, help="device address, e.g. 123456789:1")
    p.add_argument("--async", dest="asynchronous", action="store_true", help="keep --rate requests in flight")
    p.add_argument("--rate", type=int, default=100, help="outstanding requests in async mode")
    p.add_argument("--max-requests", type=int)

    p = sub.add_parser("query-devices", help="list the device ids registered for a phone number")
    p.add_argument("--target", required=True, help="phone number")

    p = sub.add_parser("fingerprint", help="guess a device's client OS from its key material")
    p.add_argument("--target", required=True)
    p.add_argument("--no-depletion", action="store_true", help="judge from a single bundle")

    p = sub.add_parser("monitor", help="infer a device's online periods from refill activity")
    p.add_argument("--target", required=True)
    p.add_argument("--interval", type=float, default=300.0, help="seconds between probes")
    p.add_argument("--horizon", type=float, default=48 * 3600.0, help="seconds to monitor")
    p.add_argument("--window", type=float, help="seconds to wait for a refill before declaring offline")

    p = sub.add_parser("dos", help="flood bundle requests for one device")
    p.add_argument("--target", required=True)
    p.add_argument("--rate", type=float, default=2000.0, help="requests per second")
    p.add_argument("--duration", type=float, default=60.0, help="seconds")

    p = sub.add_parser("pfs-experiment", help="measure how often honest initiators get no one-time prekey")
    p.add_argument("--profile", required=True, help="hardware model, e.g. iphone-se")
    p.add_argument("--state", required=True, help="power-link cell, e.g. standby-cellular")
    p.add_argument("--trials", type=int, default=500)
    p.add_argument("--cycles", type=int, default=60)
    p.add_argument("--no-verify", action="store_true", help="skip the compromise-oracle check")

    p = sub.add_parser("run", help="run every step of a scenario file")
    p.add_argument("file", type=Path, nargs="?", help="scenario file (defaults to --scenario)")
    p.add_argument("--no-baseline", action="store_true", help="skip the run without countermeasures")
    return parser


def _step_from_args(args: argparse.Namespace):
    from . import scenario as sc
    cmd = args.command
    if cmd == "deplete":
        return sc.DepleteStep(op="deplete", target=args.target, mode="async" if args.asynchronous else "sync",
                              rate=args.rate, max_requests=args.max_requests)
    if cmd == "query-devices":
        return sc.QueryStep(op="query-devices", phone=args.target)
    if cmd == "fingerprint":
        return sc.FingerprintStep(op="fingerprint", target=args.target, allow_depletion=not args.no_depletion)
    if cmd == "monitor":
        return sc.MonitorStep(op="monitor", target=args.target, poll_interval_s=args.interval,
                              horizon_s=args.horizon, response_window_s=args.window)
    if cmd == "dos":
        return sc.DosStep(op="dos", target=args.target, rate=args.rate, duration_s=args.duration)
    return sc.PfsStep(op="pfs-experiment", hardware=args.profile, state=args.state, trials=args.trials,
                      cycles=args.cycles, verify=not args.no_verify)


def _emit(report: RunReport, world, out: Path | None) -> None:
    for step in report.steps:
        print(step.summary)
    for delta in report.countermeasure_deltas:
        print(f"countermeasure effect on {delta['op']}.{delta['metric']}: "
              f"{delta['without']} -> {delta['with']}")
    if out is not None:
        for path in write_outputs(report, world, out):
            print(f"wrote {path}", file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            path = args.file or args.scenario
            if path is None:
                raise ScenarioValidationError(["run: give a scenario file or --scenario"])
            config = load_scenario(path)
            report, world = run_scenario(config, args.seed, baseline=not args.no_baseline)
            _emit(report, world, args.out)
            return EXIT_OK

        config = load_scenario(args.scenario) if args.scenario else fixture_scenario()
        seed = resolve_seed(args.seed, config)
        step = _step_from_args(args)
        world = build_world(config, seed)
        result: StepResult = run_step(world, Attacker(world), step, config, seed)
        report = RunReport(config.name, seed, [result])
        _emit(report, world, args.out)
        if args.command == "query-devices" and result.headline["devices"] == 0:
            print(f"no devices registered for {args.target}", file=sys.stderr)
            return EXIT_RUNTIME
        return EXIT_OK
    except ScenarioValidationError as exc:
        for line in exc.diagnostics:
            print(line, file=sys.stderr)
        return EXIT_CONFIG
    except (ScenarioError, ServerError, RuntimeError) as exc:
        print(f"prekeysim: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def console() -> None:  # pragma: no cover
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    console()
