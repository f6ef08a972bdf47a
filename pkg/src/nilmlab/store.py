"""Append-only CSV store for polled meter samples.

Layout::

    # format=nilmlab-store
    # key=value            (run metadata, one per line)
    t_ms,active_w,reactive_var,voltage_v,current_a,energy_wh
    0,100.0,32.86...,230.0,0.45...,0.0
    GAP,1000,6000

A file cut short by a crash ends in a partial line; readers ignore it and
``SampleStore.open`` truncates it before appending.
"""
from __future__ import annotations

import math
import os
from pathlib import Path

import numpy as np

from .samples import Gap, PowerSample

COLUMNS = ("t_ms", "active_w", "reactive_var", "voltage_v", "current_a", "energy_wh")
HEADER = ",".join(COLUMNS)
FORMAT_TAG = "nilmlab-store"
CODEC_VERSION = "1"


class StoreError(Exception):
    pass


class StoreCorruptError(StoreError):
    def __init__(self, offset: int, reason: str):
        super().__init__(f"corrupt record at byte offset {offset}: {reason}")
        self.offset = offset


def format_sample(s: PowerSample) -> str:
    return ",".join([str(int(s.t_ms))] + [repr(float(getattr(s, c))) for c in COLUMNS[1:]])


def format_gap(g: Gap) -> str:
    return f"GAP,{int(g.t_start_ms)},{int(g.t_end_ms)}"


def _parse_record(line: str, offset: int):
    parts = line.split(",")
    try:
        if parts[0] == "GAP":
            if len(parts) != 3:
                raise ValueError("gap needs 2 fields")
            return Gap(int(parts[1]), int(parts[2]))
        if len(parts) != len(COLUMNS):
            raise ValueError(f"expected {len(COLUMNS)} fields, got {len(parts)}")
        values = [float(p) for p in parts[1:]]
        if not all(math.isfinite(v) for v in values):
            raise ValueError("non-finite value")
        return PowerSample(int(parts[0]), *values)
    except ValueError as exc:
        raise StoreCorruptError(offset, str(exc)) from None


def _scan(data: bytes):
    """Yield (offset, kind, payload) for every complete line; stop at a
    partial tail."""
    pos = 0
    while pos < len(data):
        nl = data.find(b"\n", pos)
        if nl < 0:
            return
        yield pos, data[pos:nl].decode("utf-8", errors="replace")
        pos = nl + 1


def parse_store(data: bytes):
    """Return (metadata, records, end offset of the last complete line)."""
    meta = {}
    records = []
    seen_header = False
    end = 0
    last_t = None
    for offset, line in _scan(data):
        end = offset + len(line.encode("utf-8")) + 1
        if not seen_header:
            if line.startswith("#"):
                key, sep, value = line[1:].strip().partition("=")
                if not sep:
                    raise StoreCorruptError(offset, "metadata line without '='")
                meta[key.strip()] = value.strip()
                continue
            if line != HEADER:
                raise StoreCorruptError(offset, "missing column header")
            seen_header = True
            continue
        rec = _parse_record(line, offset)
        t = rec.t_ms if isinstance(rec, PowerSample) else rec.t_start_ms
        backwards = last_t is not None and t < last_t
        if backwards or (isinstance(rec, Gap) and rec.t_end_ms <= rec.t_start_ms):
            raise StoreCorruptError(offset, "timestamps out of order")
        last_t = rec.t_ms + 1 if isinstance(rec, PowerSample) else rec.t_end_ms
        records.append(rec)
    if meta and meta.get("format") != FORMAT_TAG:
        raise StoreError(f"not a {FORMAT_TAG} file")
    return meta, records, end


class SampleStore:
    """Single-writer append handle."""

    def __init__(self, path, fh, meta: dict, last_sample: PowerSample | None, next_min_t: int | None):
        self.path = Path(path)
        self._fh = fh
        self.meta = meta
        self._last_sample = last_sample
        self._next_min_t = next_min_t
        self.samples_written = 0
        self.gap_ms = 0

    @classmethod
    def create(cls, path, **meta) -> "SampleStore":
        path = Path(path)
        fh = open(path, "w", encoding="utf-8", newline="\n")
        meta = {"format": FORMAT_TAG, "codec": CODEC_VERSION, **{k: str(v) for k, v in meta.items()}}
        for k, v in meta.items():
            if "\n" in k or "\n" in v or "=" in k:
                raise StoreError(f"bad metadata entry {k!r}")
            fh.write(f"# {k}={v}\n")
        fh.write(HEADER + "\n")
        fh.flush()
        return cls(path, fh, meta, None, None)

    @classmethod
    def open(cls, path) -> "SampleStore":
        """Reopen for appending; a partial tail line is cut off first."""
        path = Path(path)
        data = path.read_bytes()
        meta, records, end = parse_store(data)
        if end < len(data):
            with open(path, "r+b") as raw:
                raw.truncate(end)
        last_sample, next_min = None, None
        for rec in records:
            if isinstance(rec, PowerSample):
                last_sample, next_min = rec, rec.t_ms + 1
            else:
                next_min = rec.t_end_ms
        fh = open(path, "a", encoding="utf-8", newline="\n")
        return cls(path, fh, meta, last_sample, next_min)

    def append(self, sample: PowerSample) -> None:
        if self._next_min_t is not None and sample.t_ms < self._next_min_t:
            raise StoreError(f"timestamp {sample.t_ms} not after {self._next_min_t - 1}")
        if sample.active_w < 0:
            raise StoreError("negative active power")
        if self._last_sample is not None and sample.energy_wh < self._last_sample.energy_wh:
            raise StoreError("energy counter went backwards")
        self._fh.write(format_sample(sample) + "\n")
        self._fh.flush()
        self._last_sample = sample
        self._next_min_t = sample.t_ms + 1
        self.samples_written += 1

    def append_gap(self, gap: Gap) -> None:
        if gap.t_end_ms <= gap.t_start_ms:
            raise StoreError("empty gap")
        if self._next_min_t is not None and gap.t_start_ms < self._next_min_t:
            raise StoreError(f"gap starts at {gap.t_start_ms}, before {self._next_min_t}")
        self._fh.write(format_gap(gap) + "\n")
        self._fh.flush()
        self._next_min_t = gap.t_end_ms
        self.gap_ms += gap.duration_ms

    def sync(self) -> None:
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.flush()
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_store(path, records, **meta) -> None:
    with SampleStore.create(path, **meta) as store:
        for rec in records:
            if isinstance(rec, Gap):
                store.append_gap(rec)
            else:
                store.append(rec)


def read_store(path):
    meta, records, _ = parse_store(Path(path).read_bytes())
    return meta, records


def read_series(path, t_from: int | None = None, t_to: int | None = None):
    """Samples with t_from <= t < t_to, plus every gap overlapping that range."""
    _, records = read_store(path)
    lo = -math.inf if t_from is None else t_from
    hi = math.inf if t_to is None else t_to
    if lo > hi:
        raise ValueError("t_from must not exceed t_to")
    out = []
    for rec in records:
        if isinstance(rec, Gap):
            if rec.t_start_ms < hi and rec.t_end_ms > lo:
                out.append(rec)
        elif lo <= rec.t_ms < hi:
            out.append(rec)
    return out


def to_grid(records, period_ms: float):
    """Resample records onto a regular grid; samples missing inside gaps
    become NaN. Returns (t_ms, active_w) arrays."""
    samples = [r for r in records if isinstance(r, PowerSample)]
    if not samples:
        return np.empty(0, dtype=np.int64), np.empty(0)
    t0, t1 = samples[0].t_ms, samples[-1].t_ms
    n = int(round((t1 - t0) / period_ms)) + 1
    t = np.array([t0 + int(round(i * period_ms)) for i in range(n)], dtype=np.int64)
    x = np.full(n, np.nan)
    for s in samples:
        i = int(round((s.t_ms - t0) / period_ms))
        x[i] = s.active_w
    return t, x
