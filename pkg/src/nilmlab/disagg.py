"""Event-based load disaggregation on an aggregate active-power series.

Pipeline: ``segment_steady`` -> ``extract_edges`` -> ``label_edges`` ->
``track_states``. All functions are pure; inputs are 1-D float arrays
indexed by sample, with NaN marking missing samples.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_WINDOW = 3
DEFAULT_EPS = 10.0
DEFAULT_MIN_DELTA = 20.0
DEFAULT_REL_TOL = 0.15
DEFAULT_ABS_TOL = 15.0
UNKNOWN = "unknown"


@dataclass(frozen=True)
class Segment:
    start: int  # first sample index
    end: int  # one past the last sample index
    mean: float

    def __len__(self):
        return self.end - self.start


@dataclass(frozen=True)
class Edge:
    index: int  # first sample after the pre-event steady state
    delta: float
    pre_mean: float
    post_mean: float
    transient_peak: float


@dataclass(frozen=True)
class Signature:
    label: str
    nominal_delta: float
    rel_tolerance: float = DEFAULT_REL_TOL
    abs_tolerance: float = DEFAULT_ABS_TOL
    expects_spike: bool = False

    def __post_init__(self):
        if self.nominal_delta <= 0:
            raise ValueError(f"{self.label}: nominal_delta must be positive")
        if self.rel_tolerance < 0 or self.abs_tolerance < 0:
            raise ValueError(f"{self.label}: tolerances must be non-negative")

    @property
    def tolerance(self) -> float:
        return max(self.rel_tolerance * self.nominal_delta, self.abs_tolerance)


@dataclass(frozen=True)
class DetectedEvent:
    t_ms: int
    label: str
    verb: str
    matched_delta: float
    confidence: float


class SignatureError(ValueError):
    pass


def segment_steady(series, m: int = DEFAULT_WINDOW, eps: float = DEFAULT_EPS) -> list[Segment]:
    """Split ``series`` into maximal runs of at least ``m`` samples whose
    spread (max - min) stays below ``eps``. Samples outside every run are
    transient."""
    if m < 2:
        raise ValueError("steady window must be at least 2 samples")
    x = np.asarray(series, dtype=float)
    n = len(x)
    segments = []
    i = 0
    while i + m <= n:
        window = x[i:i + m]
        if np.isnan(window).any() or window.max() - window.min() >= eps:
            i += 1
            continue
        lo, hi = window.min(), window.max()
        j = i + m
        while j < n and not math.isnan(x[j]):
            lo2, hi2 = min(lo, x[j]), max(hi, x[j])
            if hi2 - lo2 >= eps:
                break
            lo, hi = lo2, hi2
            j += 1
        segments.append(Segment(i, j, float(x[i:j].mean())))
        i = j
    return segments


def extract_edges(segments, series, min_delta: float = DEFAULT_MIN_DELTA) -> list[Edge]:
    x = np.asarray(series, dtype=float)
    edges = []
    for pre, post in zip(segments, segments[1:]):
        delta = post.mean - pre.mean
        if abs(delta) < min_delta:
            continue
        between = x[pre.end:post.start]
        valid = between[~np.isnan(between)]
        peak = float(valid.max()) if len(valid) else 0.0
        edges.append(Edge(_step_index(x, pre, post, delta), delta, pre.mean, post.mean, peak))
    return edges


def _step_index(x, pre: Segment, post: Segment, delta: float) -> int:
    """First sample past the pre-event level by half the step; the pre
    segment can end early when the level wanders, so its end is a poor
    event time on its own."""
    half = pre.mean + delta / 2
    for k in range(pre.end, post.start + 1):
        v = x[k]
        if not math.isnan(v) and ((delta > 0 and v >= half) or (delta < 0 and v <= half)):
            return k
    return pre.end


def label_edges(edges, signatures, t_ms=None) -> list[DetectedEvent]:
    """Greedy nearest-nominal labelling of each edge.

    ``t_ms`` maps sample indices to timestamps; without it the index is used.
    """
    if not signatures:
        raise ValueError("need at least one signature")
    events = []
    for e in edges:
        magnitude = abs(e.delta)
        verb = "ON" if e.delta > 0 else "OFF"
        best, best_err = None, math.inf
        for sig in signatures:
            err = abs(magnitude - sig.nominal_delta)
            if err > sig.tolerance:
                continue
            if sig.expects_spike and verb == "ON" and not e.transient_peak > e.post_mean:
                continue
            if err < best_err:
                best, best_err = sig, err
        t = int(t_ms[e.index]) if t_ms is not None else e.index
        if best is None:
            events.append(DetectedEvent(t, UNKNOWN, verb, e.delta, 0.0))
        else:
            bound = best.tolerance
            conf = 1.0 if bound == 0 else min(max(1.0 - best_err / bound, 0.0), 1.0)
            events.append(DetectedEvent(t, best.label, verb, e.delta, conf))
    return events


@dataclass
class Interval:
    label: str
    start_ms: int
    end_ms: int | None  # None while still ON at the end of the series
    power: float


@dataclass
class StateMap:
    events: list[DetectedEvent]
    intervals: list[Interval]
    on_since: dict[str, int]
    curves: dict[str, np.ndarray] = field(default_factory=dict)
    residual: np.ndarray | None = None
    baseline: float = 0.0
    aggregate: np.ndarray | None = None


def track_states(events, t_ms=None, aggregate=None, baseline: float | None = None) -> StateMap:
    """Pair ON/OFF events per label into intervals and rebuild load curves.

    An OFF for a label that is not ON, or a second ON for a label already ON,
    is demoted to ``unknown``. When ``aggregate`` (and its ``t_ms``) is given,
    per-label curves and the residual are reconstructed; ``baseline`` defaults
    to the aggregate's first steady level.
    """
    on_since: dict[str, tuple[int, float]] = {}
    intervals = []
    out = []
    for ev in events:
        if ev.label == UNKNOWN:
            out.append(ev)
            continue
        if ev.verb == "ON":
            if ev.label in on_since:
                out.append(DetectedEvent(ev.t_ms, UNKNOWN, ev.verb, ev.matched_delta, 0.0))
                continue
            on_since[ev.label] = (ev.t_ms, ev.matched_delta)
        else:
            if ev.label not in on_since:
                out.append(DetectedEvent(ev.t_ms, UNKNOWN, ev.verb, ev.matched_delta, 0.0))
                continue
            start, power = on_since.pop(ev.label)
            intervals.append(Interval(ev.label, start, ev.t_ms, power))
        out.append(ev)
    for label, (start, power) in on_since.items():
        intervals.append(Interval(label, start, None, power))
    intervals.sort(key=lambda iv: (iv.start_ms, iv.label))
    state = StateMap(out, intervals, {k: v[0] for k, v in on_since.items()})

    if aggregate is not None:
        if t_ms is None:
            raise ValueError("reconstruction needs sample timestamps")
        t = np.asarray(t_ms)
        agg = np.asarray(aggregate, dtype=float)
        if baseline is None:
            segs = segment_steady(agg)
            baseline = segs[0].mean if segs else float(np.nanmin(agg))
        curves = {}
        for iv in intervals:
            curve = curves.setdefault(iv.label, np.zeros(len(t)))
            end = np.inf if iv.end_ms is None else iv.end_ms
            curve[(t >= iv.start_ms) & (t < end)] = iv.power
        state.curves = curves
        state.baseline = float(baseline)
        total = np.zeros(len(t))
        for c in curves.values():
            total = total + c
        state.aggregate = agg
        state.residual = agg - state.baseline - total
    return state


def signature_collisions(signatures) -> list[tuple[str, str]]:
    """Pairs whose acceptance bands |delta| in [nominal - tol, nominal + tol] overlap."""
    pairs = []
    for i, a in enumerate(signatures):
        for b in signatures[i + 1:]:
            if abs(a.nominal_delta - b.nominal_delta) <= a.tolerance + b.tolerance:
                pairs.append((a.label, b.label))
    return pairs


def check_signatures(signatures) -> None:
    labels = [s.label for s in signatures]
    if len(set(labels)) != len(labels):
        raise SignatureError(f"duplicate signature labels in {labels}")
    if UNKNOWN in labels:
        raise SignatureError(f"{UNKNOWN!r} is reserved")
    collisions = signature_collisions(signatures)
    if collisions:
        listing = ", ".join(f"{a}/{b}" for a, b in collisions)
        log.warning("overlapping signature tolerances: %s", listing)
        raise SignatureError(f"overlapping signature tolerances: {listing}")


def _flag(text: str) -> bool:
    return text.strip().lower() in ("1", "true", "yes", "y")


def load_signatures(path) -> list[Signature]:
    """Read ``label,nominal_w,rel_tol,abs_tol_w,expects_spike`` rows.
    Blank tolerance cells fall back to the defaults."""
    sigs = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rel = (row.get("rel_tol") or "").strip()
            abs_ = (row.get("abs_tol_w") or "").strip()
            sigs.append(Signature(
                label=row["label"].strip(),
                nominal_delta=float(row["nominal_w"]),
                rel_tolerance=float(rel) if rel else DEFAULT_REL_TOL,
                abs_tolerance=float(abs_) if abs_ else DEFAULT_ABS_TOL,
                expects_spike=_flag(row.get("expects_spike") or ""),
            ))
    check_signatures(sigs)
    return sigs


def event_lines(events) -> list[str]:
    return [json.dumps({"t_ms": e.t_ms, "label": e.label, "verb": e.verb,
                        "delta_w": e.matched_delta, "confidence": e.confidence})
            for e in events]


def read_events(path) -> list[DetectedEvent]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(DetectedEvent(int(d["t_ms"]), d["label"], d["verb"],
                                         float(d["delta_w"]), float(d["confidence"])))
    return out


@dataclass
class DetectorConfig:
    m: int = DEFAULT_WINDOW
    eps: float = DEFAULT_EPS
    min_delta: float = DEFAULT_MIN_DELTA


def detect(t_ms, aggregate, signatures, config: DetectorConfig | None = None) -> StateMap:
    """Full batch pipeline over one series."""
    cfg = config or DetectorConfig()
    segments = segment_steady(aggregate, cfg.m, cfg.eps)
    edges = extract_edges(segments, aggregate, cfg.min_delta)
    labelled = label_edges(edges, signatures, t_ms)
    return track_states(labelled, t_ms, aggregate)


class StreamingDetector:
    """Re-runs segmentation over a sliding tail window as samples arrive.

    Emits each edge once, as soon as the steady state after it is confirmed
    (``m`` samples) and it lies inside the window.
    """

    def __init__(self, signatures, config: DetectorConfig | None = None, window: int = 120):
        self.signatures = list(signatures)
        self.config = config or DetectorConfig()
        self.window = window
        self._t = deque(maxlen=window)
        self._x = deque(maxlen=window)
        self._last_emitted_ms = None
        self._open: dict[str, int] = {}

    def push(self, t_ms: int, power: float) -> list[DetectedEvent]:
        self._t.append(int(t_ms))
        self._x.append(float(power))
        cfg = self.config
        x = np.fromiter(self._x, float)
        t = np.fromiter(self._t, np.int64)
        segs = segment_steady(x, cfg.m, cfg.eps)
        edges = extract_edges(segs, x, cfg.min_delta)
        fresh = [e for e in label_edges(edges, self.signatures, t)
                 if self._last_emitted_ms is None or e.t_ms > self._last_emitted_ms]
        out = []
        for ev in fresh:
            if ev.label != UNKNOWN:
                if ev.verb == "ON" and ev.label in self._open:
                    ev = DetectedEvent(ev.t_ms, UNKNOWN, ev.verb, ev.matched_delta, 0.0)
                elif ev.verb == "OFF" and ev.label not in self._open:
                    ev = DetectedEvent(ev.t_ms, UNKNOWN, ev.verb, ev.matched_delta, 0.0)
                elif ev.verb == "ON":
                    self._open[ev.label] = ev.t_ms
                else:
                    del self._open[ev.label]
            out.append(ev)
            self._last_emitted_ms = ev.t_ms
        return out
