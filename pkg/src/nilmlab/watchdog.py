"""Duty-cycle screening for periodic appliances (fridges, freezers).

Each ON/OFF pair becomes a ``CycleRecord``. A cycle is anomalous when its ON
(or the following OFF) time exceeds ``k`` times the median of the most recent
``n`` normal cycles. Anomalous cycles never enter the baseline.
"""
from __future__ import annotations

import json
import statistics
from dataclasses import dataclass

INSUFFICIENT = "insufficient baseline"
OK = "ok"


@dataclass(frozen=True)
class CycleRecord:
    label: str
    on_start_ms: int
    on_end_ms: int | None  # None while the ON phase is still running
    next_on_ms: int | None = None

    @property
    def in_progress(self) -> bool:
        return self.on_end_ms is None

    @property
    def on_duration_s(self) -> float | None:
        if self.on_end_ms is None:
            return None
        return (self.on_end_ms - self.on_start_ms) / 1000.0

    @property
    def following_off_s(self) -> float | None:
        if self.on_end_ms is None or self.next_on_ms is None:
            return None
        return (self.next_on_ms - self.on_end_ms) / 1000.0


@dataclass(frozen=True)
class Anomaly:
    label: str
    kind: str  # elongated_on | elongated_off | missing_cycle
    observed_s: float
    baseline_s: float
    ratio: float
    t_start_ms: int
    t_end_ms: int
    in_progress: bool = False

    def to_json(self) -> str:
        return json.dumps({"label": self.label, "kind": self.kind,
                           "observed_s": self.observed_s, "baseline_s": self.baseline_s,
                           "ratio": self.ratio, "t_start_ms": self.t_start_ms,
                           "t_end_ms": self.t_end_ms})


@dataclass
class Screening:
    anomalies: list[Anomaly]
    status: str


def _label(ev) -> str:
    return getattr(ev, "label", None) or getattr(ev, "appliance")


def build_cycles(events, label: str) -> list[CycleRecord]:
    """Pair consecutive ON/OFF events of ``label``. Repeated ONs and orphan
    OFFs are skipped; a trailing ON becomes an in-progress record."""
    records = []
    start = None
    for ev in events:
        if _label(ev) != label:
            continue
        if ev.verb == "ON":
            if start is not None:
                continue
            start = ev.t_ms
            if records and records[-1].next_on_ms is None:
                last = records[-1]
                records[-1] = CycleRecord(label, last.on_start_ms, last.on_end_ms, start)
        elif start is not None:
            if ev.t_ms > start:
                records.append(CycleRecord(label, start, ev.t_ms))
            start = None
    if start is not None:
        records.append(CycleRecord(label, start, None))
    return records


def detect_anomalies(cycles, n: int = 3, k: float = 2.0, now_ms: int | None = None) -> Screening:
    """Screen chronologically ordered cycles of one label.

    ``now_ms`` enables reporting of phases that have not ended yet: an ON
    phase still running, or an OFF phase with no restart.
    """
    if n < 3:
        raise ValueError("baseline needs at least 3 cycles")
    closed = [c for c in cycles if not c.in_progress]
    if len(closed) < n:
        return Screening([], INSUFFICIENT)

    on_hist: list[float] = []
    off_hist: list[float] = []
    found = []

    def baseline(hist):
        return statistics.median(hist[-n:]) if len(hist) >= n else None

    for c in cycles:
        if c.in_progress:
            base = baseline(on_hist)
            if now_ms is not None and base:
                observed = (now_ms - c.on_start_ms) / 1000.0
                if observed > k * base:
                    found.append(Anomaly(c.label, "elongated_on", observed, base,
                                         observed / base, c.on_start_ms, now_ms, True))
            continue

        on = c.on_duration_s
        base = baseline(on_hist)
        if base and on > k * base:
            found.append(Anomaly(c.label, "elongated_on", on, base, on / base,
                                 c.on_start_ms, c.on_end_ms))
        else:
            on_hist.append(on)

        off = c.following_off_s
        off_end = c.next_on_ms
        pending = False
        if off is None and now_ms is not None and now_ms > c.on_end_ms:
            off, off_end, pending = (now_ms - c.on_end_ms) / 1000.0, now_ms, True
        if off is None:
            continue
        base = baseline(off_hist)
        if base and off > k * base:
            found.append(Anomaly(c.label, "elongated_off", off, base, off / base,
                                 c.on_end_ms, off_end, pending))
            if off > 2 * k * base:
                found.append(Anomaly(c.label, "missing_cycle", off, base, off / base,
                                     c.on_end_ms, off_end, pending))
        elif not pending:
            off_hist.append(off)
    return Screening(found, OK)


class DutyCycleWatch:
    """Streaming wrapper: feed events in arrival order, get each anomaly once.

    An elongated ON phase is reported while still running (via ``tick``) and
    not again when it closes.
    """

    def __init__(self, label: str, n: int = 3, k: float = 2.0):
        self.label = label
        self.n = n
        self.k = k
        self.events = []
        self._reported = set()

    def _emit(self, now_ms):
        cycles = build_cycles(self.events, self.label)
        fresh = []
        for a in detect_anomalies(cycles, self.n, self.k, now_ms).anomalies:
            key = (a.kind, a.t_start_ms)
            if key not in self._reported:
                self._reported.add(key)
                fresh.append(a)
        return fresh

    def push(self, event) -> list[Anomaly]:
        if _label(event) != self.label:
            return []
        self.events.append(event)
        return self._emit(None)

    def tick(self, now_ms: int) -> list[Anomaly]:
        return self._emit(now_ms)


def read_anomalies(path) -> list[Anomaly]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(Anomaly(d["label"], d["kind"], d["observed_s"], d["baseline_s"],
                                   d["ratio"], d["t_start_ms"], d["t_end_ms"]))
    return out
