import json
import os
import socket
import subprocess
import sys
import time

import pytest

from nilmlab import cli
from nilmlab.disagg import detect, event_lines, load_signatures
from nilmlab.samples import Gap
from nilmlab.sim import load_scenario, simulate
from nilmlab.store import read_store

from conftest import SCENARIOS, running_meter

TABLE1 = str(SCENARIOS / "table1.json")
FIG2 = str(SCENARIOS / "fig2.json")
SIGS = str(SCENARIOS / "signatures.csv")


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: ")
    return err[0]


@pytest.fixture
def table1_run(tmp_path):
    trace, truth, events = tmp_path / "trace.csv", tmp_path / "truth.jsonl", tmp_path / "events.jsonl"
    assert cli.run(["simulate", "--scenario", TABLE1, "--out", str(trace), "--truth", str(truth)]) == 0
    assert cli.run(["detect", "--in", str(trace), "--signatures", SIGS, "--out", str(events)]) == 0
    return trace, truth, events


def test_simulate_detect_report(table1_run, tmp_path):
    trace, truth, events = table1_run
    lines = trace.read_text().splitlines()
    assert lines[0].startswith("t_ms,aggregate_w")
    assert len(lines) - 1 == 2100
    assert len(events.read_text().splitlines()) == 16
    out = tmp_path / "report.json"
    assert cli.run(["report", "--events", str(events), "--truth", str(truth), "--in", str(trace),
                    "--signatures", SIGS, "--format", "json", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["score"]["precision"] == 1.0 and rep["score"]["recall"] == 1.0
    assert sorted(rep["sub_threshold"]) == ["monitor", "pc", "ventilator"]


def test_text_report_to_stdout(table1_run, capsys):
    trace, truth, events = table1_run
    capsys.readouterr()
    assert cli.run(["report", "--events", str(events), "--truth", str(truth)]) == 0
    assert "precision 1.000, recall 1.000" in capsys.readouterr().out


def test_composition_matches_in_process(table1_run):
    _, _, events = table1_run
    r = simulate(load_scenario(TABLE1))
    state = detect(r.t_ms, r.aggregate, load_signatures(SIGS))
    assert events.read_text().splitlines() == event_lines(state.events)


def test_noise_override(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    cli.run(["simulate", "--scenario", TABLE1, "--out", str(a), "--noise-sigma", "5", "--seed", "1"])
    cli.run(["simulate", "--scenario", TABLE1, "--out", str(b), "--noise-sigma", "5", "--seed", "2"])
    assert a.read_text() != b.read_text()


def test_watch_fig2(tmp_path, capsys):
    trace, events = tmp_path / "t.csv", tmp_path / "e.jsonl"
    cli.run(["simulate", "--scenario", FIG2, "--out", str(trace)])
    cli.run(["detect", "--in", str(trace), "--signatures", SIGS, "--out", str(events)])
    capsys.readouterr()
    assert cli.run(["watch", "--events", str(events), "--k", "2.0", "--n", "3"]) == 0
    (line,) = capsys.readouterr().out.splitlines()
    assert json.loads(line)["kind"] == "elongated_on"


def test_usage_errors(capsys):
    assert cli.run(["bogus"]) == cli.EXIT_USAGE
    assert error_line(capsys).startswith("error: usage:")
    assert cli.run(["simulate", "--scenario", TABLE1, "--out", "x", "--frobnicate"]) == cli.EXIT_USAGE
    error_line(capsys)
    assert cli.run(["log", "--meter", "host:notaport", "--out", "x"]) == cli.EXIT_USAGE
    error_line(capsys)


def test_missing_file(tmp_path, capsys):
    code = cli.run(["simulate", "--scenario", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_MISSING
    assert "nope.json" in error_line(capsys)


def test_invalid_scenario(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"appliances": [], "actions": [{"t_s": 1, "appliance": "x", "verb": "ON"}],
                               "duration_s": 5}))
    assert cli.run(["simulate", "--scenario", str(bad), "--out", str(tmp_path / "o")]) == cli.EXIT_INVALID
    assert error_line(capsys).startswith("error: invalid-input:")
    assert not (tmp_path / "o").exists()


def test_colliding_signatures(tmp_path, table1_run, capsys):
    trace, _, _ = table1_run
    sig = tmp_path / "s.csv"
    sig.write_text("label,nominal_w,rel_tol,abs_tol_w,expects_spike\na,40,,,\nb,45,,,\n")
    code = cli.run(["detect", "--in", str(trace), "--signatures", str(sig), "--out", str(tmp_path / "e")])
    assert code == cli.EXIT_INVALID
    assert "a/b" in capsys.readouterr().err


def test_bind_conflict(capsys):
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        s.listen()
        port = s.getsockname()[1]
        assert cli.run(["serve", "--scenario", TABLE1, "--bind", f"127.0.0.1:{port}"]) == cli.EXIT_BIND
    assert error_line(capsys).startswith("error: bind:")


def test_unreachable_meter(tmp_path, capsys):
    code = cli.run(["log", "--meter", f"127.0.0.1:{free_port()}", "--out", str(tmp_path / "s.csv"),
                    "--give-up-s", "0.3"])
    assert code == cli.EXIT_UNREACHABLE
    assert error_line(capsys).startswith("error: unreachable:")


def test_help_lists_exit_codes(capsys):
    with pytest.raises(SystemExit):
        cli.run(["--help"])
    out = capsys.readouterr().out
    for code in range(1, 7):
        assert f"  {code}  " in out


def test_interrupted_write_leaves_nothing(tmp_path, monkeypatch):
    out = tmp_path / "trace.csv"

    def boom(src, dst):
        raise KeyboardInterrupt

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(KeyboardInterrupt):
        cli.run(["simulate", "--scenario", TABLE1, "--out", str(out)])
    assert list(tmp_path.iterdir()) == []


def test_overwrite_is_atomic(tmp_path, monkeypatch):
    out = tmp_path / "trace.csv"
    out.write_text("old\n")
    monkeypatch.setattr(os, "replace", lambda s, d: (_ for _ in ()).throw(OSError("disk full")))
    assert cli.run(["simulate", "--scenario", TABLE1, "--out", str(out)]) == cli.EXIT_MISSING
    assert out.read_text() == "old\n"
    assert [p.name for p in tmp_path.iterdir()] == ["trace.csv"]


def small_scenario(tmp_path):
    doc = {"appliances": [{"id": "kettle", "kind": "constant_load", "steady_w": 2000}],
           "actions": [{"t_s": 5, "appliance": "kettle", "verb": "ON"},
                       {"t_s": 15, "appliance": "kettle", "verb": "OFF"}],
           "duration_s": 30, "sample_rate_hz": 1, "baseline_w": 100, "noise_sigma_w": 0, "seed": 0}
    path = tmp_path / "small.json"
    path.write_text(json.dumps(doc))
    return path


def wait_for_port(port, timeout=10):
    end = time.monotonic() + timeout
    while time.monotonic() < end:
        try:
            socket.create_connection(("127.0.0.1", port), timeout=0.2).close()
            return
        except OSError:
            time.sleep(0.02)
    raise TimeoutError(port)


def test_serve_and_log_processes(tmp_path):
    port = free_port()
    truth = tmp_path / "truth.jsonl"
    env = dict(os.environ, NILMLAB_LOG="INFO")
    proc = subprocess.Popen([sys.executable, "-m", "nilmlab", "serve", "--scenario", str(small_scenario(tmp_path)),
                             "--bind", f"127.0.0.1:{port}", "--accel", "10", "--exit-at-end",
                             "--truth-out", str(truth)], stderr=subprocess.PIPE, text=True, env=env)
    try:
        wait_for_port(port)
        store_path = tmp_path / "s.csv"
        assert cli.run(["log", "--meter", f"127.0.0.1:{port}", "--out", str(store_path),
                        "--until-ms", "29000", "--give-up-s", "3", "--scenario-name", "small"]) == 0
        _, err = proc.communicate(timeout=15)
    finally:
        proc.kill()
    assert proc.returncode == 0
    assert "meter listening" in err
    assert [json.loads(l)["verb"] for l in truth.read_text().splitlines()] == ["ON", "OFF"]
    meta, records = read_store(store_path)
    assert meta["scenario"] == "small"
    samples = [r for r in records if not isinstance(r, Gap)]
    assert not any(isinstance(r, Gap) for r in records)
    assert samples[0].t_ms <= 1000 and samples[-1].t_ms == 29000
    assert {s.active_w for s in samples} == {100.0, 2100.0}


def test_replay_round_trip(tmp_path):
    sc = load_scenario(small_scenario(tmp_path))
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    with running_meter(sc, accel=30) as svc:
        host, port = svc.address[:2]
        assert cli.run(["log", "--meter", f"{host}:{port}", "--out", str(first), "--until-ms", "29000"]) == 0
    port = free_port()
    proc = subprocess.Popen([sys.executable, "-m", "nilmlab", "replay", "--in", str(first),
                             "--bind", f"127.0.0.1:{port}", "--accel", "30", "--exit-at-end"])
    try:
        wait_for_port(port)
        assert cli.run(["log", "--meter", f"127.0.0.1:{port}", "--out", str(second),
                        "--until-ms", "29000", "--give-up-s", "3"]) == 0
        proc.wait(timeout=15)
    finally:
        proc.kill()
    a = [r for r in read_store(first)[1] if not isinstance(r, Gap)]
    b = [r for r in read_store(second)[1] if not isinstance(r, Gap)]
    # the replayed meter starts serving at its first stored sample
    assert b == [s for s in a if s.t_ms >= b[0].t_ms]
    assert len(b) >= len(a) - 2
