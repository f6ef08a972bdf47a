"""Scoring against ground truth and the run summary."""
from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

RELIABLE_DELTA_W = 100.0


@dataclass
class Score:
    matched: int
    detected: int
    truth: int
    precision: float
    recall: float
    precision_defined: bool
    confusion: dict = field(default_factory=dict)


def _truth_label(e):
    return getattr(e, "appliance", None) or e.label


def score(events, truth, tolerance_ms: int = 3000, labels=None) -> Score:
    """One-to-one greedy matching in time order: same label, same verb,
    |dt| <= tolerance. ``labels`` restricts both sides to a label subset."""
    if labels is not None:
        labels = set(labels)
        events = [e for e in events if e.label in labels]
        truth = [t for t in truth if _truth_label(t) in labels]
    used = [False] * len(truth)
    det_used = [False] * len(events)
    matched = 0
    for i, ev in enumerate(events):
        for j, tr in enumerate(truth):
            if used[j] or _truth_label(tr) != ev.label or tr.verb != ev.verb:
                continue
            if abs(tr.t_ms - ev.t_ms) <= tolerance_ms:
                used[j] = det_used[i] = True
                matched += 1
                break

    confusion: dict[str, Counter] = defaultdict(Counter)
    for j, tr in enumerate(truth):
        lbl = _truth_label(tr)
        if used[j]:
            confusion[lbl][lbl] += 1
            continue
        guess = "missed"
        for i, ev in enumerate(events):
            if not det_used[i] and ev.verb == tr.verb and abs(ev.t_ms - tr.t_ms) <= tolerance_ms:
                guess = ev.label
                det_used[i] = True
                break
        confusion[lbl][guess] += 1
    for i, ev in enumerate(events):
        if not det_used[i]:
            confusion["(none)"][ev.label] += 1

    detected = len(events)
    return Score(
        matched=matched,
        detected=detected,
        truth=len(truth),
        precision=matched / detected if detected else 0.0,
        recall=matched / len(truth) if truth else 0.0,
        precision_defined=detected > 0,
        confusion={k: dict(v) for k, v in confusion.items()},
    )


@dataclass
class RunReport:
    event_counts: dict
    energy_wh: dict = field(default_factory=dict)
    aggregate_energy_wh: float | None = None
    baseline_energy_wh: float | None = None
    residual_energy_wh: float | None = None
    residual_share: float | None = None
    score: Score | None = None
    reliable_score: Score | None = None
    reliable_labels: list = field(default_factory=list)
    sub_threshold: list = field(default_factory=list)
    anomalies: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["anomalies"] = [asdict(a) if hasattr(a, "__dataclass_fields__") else a
                          for a in self.anomalies]
        return d

    def to_text(self) -> str:
        lines = ["events per label:"]
        for label, n in sorted(self.event_counts.items()):
            lines.append(f"  {label:<12} {n}")
        if self.energy_wh:
            lines.append("energy from reconstructed curves (Wh):")
            for label, e in sorted(self.energy_wh.items()):
                lines.append(f"  {label:<12} {e:.3f}")
            lines.append(f"  {'residual':<12} {self.residual_energy_wh:.3f}"
                         f" ({100 * self.residual_share:.1f}% of above-baseline energy)")
        for name, sc in (("all labels", self.score), ("reliable labels", self.reliable_score)):
            if sc is None:
                continue
            prec = f"{sc.precision:.3f}" if sc.precision_defined else "undefined (no detections)"
            lines.append(f"{name}: precision {prec}, recall {sc.recall:.3f}"
                         f" ({sc.matched} matched, {sc.detected} detected, {sc.truth} true)")
        if self.sub_threshold:
            lines.append("sub-threshold devices (|delta| < "
                         f"{RELIABLE_DELTA_W:g} W, detection not guaranteed): "
                         + ", ".join(self.sub_threshold))
        if self.anomalies:
            lines.append("anomalies:")
            for a in self.anomalies:
                lines.append(f"  {a.label} {a.kind}: {a.observed_s:.0f} s vs baseline "
                             f"{a.baseline_s:.0f} s (x{a.ratio:.2f}) at {a.t_start_ms}..{a.t_end_ms} ms")
        return "\n".join(lines)


def split_by_threshold(signatures, threshold: float = RELIABLE_DELTA_W):
    reliable = [s.label for s in signatures if s.nominal_delta >= threshold]
    sub = [s.label for s in signatures if s.nominal_delta < threshold]
    return reliable, sub


def build_report(events, truth=None, signatures=None, state=None, period_ms: float = 1000.0,
                 anomalies=(), tolerance_ms: int = 3000,
                 threshold: float = RELIABLE_DELTA_W) -> RunReport:
    """``state`` is a ``StateMap`` with curves (from ``track_states`` with an
    aggregate); energy figures are omitted without it."""
    counts = Counter(e.label for e in events)
    report = RunReport(event_counts=dict(counts), anomalies=list(anomalies))
    if signatures:
        report.reliable_labels, report.sub_threshold = split_by_threshold(signatures, threshold)
    if state is not None and state.residual is not None:
        hours = period_ms / 1000.0 / 3600.0
        agg = state.aggregate
        valid = ~np.isnan(agg)
        report.energy_wh = {k: float(np.sum(c[valid]) * hours) for k, c in state.curves.items()}
        report.aggregate_energy_wh = float(np.sum(agg[valid]) * hours)
        report.baseline_energy_wh = float(state.baseline * np.count_nonzero(valid) * hours)
        report.residual_energy_wh = float(np.sum(state.residual[valid]) * hours)
        above = report.aggregate_energy_wh - report.baseline_energy_wh
        report.residual_share = report.residual_energy_wh / above if above else 0.0
    if truth is not None:
        report.score = score(events, truth, tolerance_ms)
        if report.reliable_labels:
            report.reliable_score = score(events, truth, tolerance_ms, report.reliable_labels)
    return report
