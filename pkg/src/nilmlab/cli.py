"""Command-line entry point: ``nilmlab <subcommand> ...``.

Exit codes:
  0  success
  2  bad usage (unknown subcommand or flag)
  3  input file missing or unreadable
  4  invalid input (scenario, signature table, store, events)
  5  cannot bind the listening address (port in use)
  6  meter unreachable
  1  anything else

Failures print one line to stderr: ``error: <kind>: <message>``.
Set NILMLAB_LOG (DEBUG, INFO, WARNING, ...) to control log verbosity.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
from pathlib import Path

import numpy as np

from . import disagg, report, sim, store, watchdog
from .files import atomic_write_lines, atomic_write_text

log = logging.getLogger("nilmlab")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_INVALID = 4
EXIT_BIND = 5
EXIT_UNREACHABLE = 6


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int):
        super().__init__(message)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, EXIT_USAGE)


def parse_address(text: str, default_host: str = "127.0.0.1"):
    host, sep, port = text.rpartition(":")
    if not sep:
        host, port = default_host, text
    try:
        return host or default_host, int(port)
    except ValueError:
        raise CliError("usage", f"bad address {text!r}, expected HOST:PORT", EXIT_USAGE) from None


def _existing(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError("missing-file", f"{p} not found", EXIT_MISSING)
    return p


def load_series(path):
    """Read a simulator trace CSV or a sample store into (t_ms, active_w, period_ms)."""
    p = _existing(path)
    with open(p, encoding="utf-8") as fh:
        first = fh.readline()
    if first.startswith("#"):
        meta, records = store.read_store(p)
        period = 1000.0 / float(meta.get("sample_rate_hz", "1"))
        t, x = store.to_grid(records, period)
        return t, x, period
    if first.startswith("t_ms,aggregate_w"):
        data = np.loadtxt(p, delimiter=",", skiprows=1, usecols=(0, 1), ndmin=2)
        t = data[:, 0].astype(np.int64)
        period = float(np.median(np.diff(t))) if len(t) > 1 else 1000.0
        return t, data[:, 1], period
    raise CliError("invalid-input", f"{p}: neither a trace nor a sample store", EXIT_INVALID)


def _install_signal_handlers(stop: threading.Event):
    def handler(signum, frame):
        log.info("signal %d received, shutting down", signum)
        stop.set()
    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            signal.signal(sig, handler)
        except ValueError:  # not in main thread
            pass


# -- subcommands ------------------------------------------------------------

def cmd_simulate(args):
    scenario = sim.load_scenario(_existing(args.scenario))
    overrides = {}
    if args.noise_sigma is not None:
        overrides["noise_sigma"] = args.noise_sigma
    if args.seed is not None:
        overrides["rng_seed"] = args.seed
    scenario = scenario.with_overrides(**overrides)
    result = sim.simulate(scenario)
    atomic_write_lines(args.out, sim.trace_lines(result))
    if args.truth:
        atomic_write_lines(args.truth, sim.truth_lines(result.truth.events))
    log.info("wrote %d samples, %d truth events", len(result.aggregate), len(result.truth.events))
    return EXIT_OK


def cmd_serve(args):
    from .meter import MeterStartupError, serve

    scenario = sim.load_scenario(_existing(args.scenario))
    stop = threading.Event()
    _install_signal_handlers(stop)
    try:
        serve(scenario, parse_address(args.bind), args.accel, args.exit_at_end,
              args.truth_out, stop)
    except MeterStartupError as exc:
        raise CliError("bind", str(exc), EXIT_BIND) from None
    return EXIT_OK


def cmd_replay(args):
    from .meter import MeterClock, MeterService, MeterStartupError, ReplaySource, VirtualMeter

    meta, records = store.read_store(_existing(args.input))
    samples = [r for r in records if not isinstance(r, store.Gap)]
    if not samples:
        raise CliError("invalid-input", f"{args.input} holds no samples", EXIT_INVALID)
    period = 1000.0 / float(meta.get("sample_rate_hz", "1"))
    meter = VirtualMeter(ReplaySource(samples, period))
    service = MeterService(meter, MeterClock(args.accel, origin_ms=samples[0].t_ms),
                           parse_address(args.bind), args.exit_at_end)
    stop = threading.Event()
    _install_signal_handlers(stop)
    try:
        service.start()
    except MeterStartupError as exc:
        raise CliError("bind", str(exc), EXIT_BIND) from None
    try:
        while not service.wait(0.2) and not stop.is_set():
            pass
    finally:
        service.stop()
    return EXIT_OK


def cmd_log(args):
    from .acquisition import ModbusClient, poll_loop

    host, port = parse_address(args.meter)
    out = Path(args.out)
    if out.exists() and args.append:
        sink = store.SampleStore.open(out)
    else:
        sink = store.SampleStore.create(out, scenario=args.scenario_name, sample_rate_hz=args.rate,
                                        meter=f"{host}:{port}")
    stop = threading.Event()
    _install_signal_handlers(stop)
    with sink:
        poller = poll_loop(ModbusClient(host, port), sink, args.rate, stop,
                           until_ms=args.until_ms, give_up_s=args.give_up_s)
    log.info("stored %d samples, %d ms of gaps", sink.samples_written, sink.gap_ms)
    if sink.samples_written == 0 and poller.failures:
        raise CliError("unreachable", f"no reply from meter at {host}:{port}", EXIT_UNREACHABLE)
    return EXIT_OK


def _detector_config(args) -> disagg.DetectorConfig:
    return disagg.DetectorConfig(m=args.m, eps=args.eps, min_delta=args.min_delta)


def cmd_detect(args):
    sigs = disagg.load_signatures(_existing(args.signatures))
    t, x, _ = load_series(args.input)
    state = disagg.detect(t, x, sigs, _detector_config(args))
    atomic_write_lines(args.out, disagg.event_lines(state.events))
    log.info("%d events", len(state.events))
    return EXIT_OK


def cmd_watch(args):
    events = disagg.read_events(_existing(args.events))
    cycles = watchdog.build_cycles(events, args.label)
    screening = watchdog.detect_anomalies(cycles, args.n, args.k, args.now_ms)
    lines = [a.to_json() for a in screening.anomalies]
    if screening.status != watchdog.OK:
        log.warning("%s: %s (%d closed cycles)", args.label, screening.status,
                    sum(not c.in_progress for c in cycles))
    if args.out:
        atomic_write_lines(args.out, lines)
    else:
        for line in lines:
            print(line)
    return EXIT_OK


def cmd_report(args):
    events = disagg.read_events(_existing(args.events))
    truth = sim.read_truth(_existing(args.truth)) if args.truth else None
    sigs = disagg.load_signatures(_existing(args.signatures)) if args.signatures else None
    state, period = None, 1000.0
    if args.input:
        t, x, period = load_series(args.input)
        state = disagg.track_states(events, t, x)
    anomalies = watchdog.read_anomalies(_existing(args.anomalies)) if args.anomalies else ()
    rep = report.build_report(events, truth, sigs, state, period, anomalies,
                              tolerance_ms=int(round(args.tolerance_s * 1000)),
                              threshold=args.reliable_w)
    text = json.dumps(rep.to_dict(), indent=2) if args.format == "json" else rep.to_text()
    if args.out:
        atomic_write_text(args.out, text + "\n")
    else:
        print(text)
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nilmlab", description="Desk-scale NILM lab: simulate, serve, log, detect, watch.",
                epilog=__doc__.split("\n\n", 1)[1], formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="run a scenario to a trace CSV")
    s.add_argument("--scenario", required=True)
    s.add_argument("--out", required=True, help="trace CSV t_ms,aggregate_w,<appliances>")
    s.add_argument("--truth", help="ground-truth JSON-lines output")
    s.add_argument("--noise-sigma", type=float, help="override the scenario's noise sigma (W)")
    s.add_argument("--seed", type=int, help="override the scenario's RNG seed")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("serve", help="serve a scenario as a Modbus TCP meter")
    s.add_argument("--scenario", required=True)
    s.add_argument("--bind", default="127.0.0.1:1502")
    s.add_argument("--accel", type=float, default=1.0, help="simulated seconds per wall second")
    s.add_argument("--exit-at-end", action="store_true")
    s.add_argument("--truth-out")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("replay", help="serve a recorded store as a Modbus TCP meter")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--bind", default="127.0.0.1:1502")
    s.add_argument("--accel", type=float, default=1.0)
    s.add_argument("--exit-at-end", action="store_true")
    s.set_defaults(func=cmd_replay)

    s = sub.add_parser("log", help="poll a meter into a sample store")
    s.add_argument("--meter", required=True, help="HOST:PORT")
    s.add_argument("--rate", type=float, default=1.0, help="samples per simulated second")
    s.add_argument("--out", required=True)
    s.add_argument("--append", action="store_true", help="append to an existing store")
    s.add_argument("--until-ms", type=int, help="stop once the meter clock reaches this time")
    s.add_argument("--give-up-s", type=float, help="stop after this long without a reply")
    s.add_argument("--scenario-name", default="", help="recorded in the store header")
    s.set_defaults(func=cmd_log)

    s = sub.add_parser("detect", help="disaggregate a trace or store into events")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--signatures", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--m", type=int, default=disagg.DEFAULT_WINDOW, help="steady window (samples)")
    s.add_argument("--eps", type=float, default=disagg.DEFAULT_EPS, help="steadiness bound (W)")
    s.add_argument("--min-delta", type=float, default=disagg.DEFAULT_MIN_DELTA, help="edge threshold (W)")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("watch", help="screen duty cycles for anomalies")
    s.add_argument("--events", required=True)
    s.add_argument("--label", default="fridge")
    s.add_argument("--k", type=float, default=2.0)
    s.add_argument("--n", type=int, default=3)
    s.add_argument("--now-ms", type=int, help="report phases still running at this time")
    s.add_argument("--out")
    s.set_defaults(func=cmd_watch)

    s = sub.add_parser("report", help="summarize events, energy, and accuracy")
    s.add_argument("--events", required=True)
    s.add_argument("--truth")
    s.add_argument("--in", dest="input", help="trace or store, for energy figures")
    s.add_argument("--signatures", help="lists sub-threshold devices and scores the rest")
    s.add_argument("--anomalies")
    s.add_argument("--tolerance-s", type=float, default=3.0)
    s.add_argument("--reliable-w", type=float, default=report.RELIABLE_DELTA_W)
    s.add_argument("--format", choices=("text", "json"), default="text")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def run(argv=None) -> int:
    level = os.environ.get("NILMLAB_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except CliError as exc:
        err = exc
    except (sim.ScenarioError, disagg.SignatureError, store.StoreError) as exc:
        err = CliError("invalid-input", str(exc), EXIT_INVALID)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        err = CliError("invalid-input", str(exc), EXIT_INVALID)
    except OSError as exc:
        err = CliError("io", str(exc), EXIT_MISSING)
    print(f"error: {err.kind}: {' '.join(str(err).split())}", file=sys.stderr)
    return err.code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
