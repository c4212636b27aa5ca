"""Epoch averaging of MAG and segmentation of activity into trajectories."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EPOCH_SECONDS = 20.0
HORIZON = 61  # relative epochs covering 0-20 minutes inclusive
RECORD_FIELDS = ("subject_id", "timestamp", "lat", "lon", "mag")


def mag(x, y, z):
    """Instantaneous magnitude of a triaxial acceleration reading."""
    return np.sqrt(np.square(x) + np.square(y) + np.square(z))


def _seconds(ts) -> float:
    if isinstance(ts, datetime):
        return ts.timestamp()
    return float(ts)


def epoch_average_mag(samples: Iterable[tuple], width: float = EPOCH_SECONDS) -> list[tuple[int, float]]:
    """Mean MAG per consecutive window anchored at the first sample.

    ``samples`` yields ``(timestamp, mag)`` with timestamps as datetimes or
    seconds.  Returns ``(k, mean)`` pairs where ``k`` counts windows from the
    anchor; windows without samples are skipped.
    """
    sums: dict[int, list[float]] = {}
    t0 = prev = None
    for ts, m in samples:
        s = _seconds(ts)
        if prev is not None and s < prev:
            raise ValueError(f"samples are not time-ordered at timestamp {ts}")
        if t0 is None:
            t0 = s
        prev = s
        k = int(math.floor((s - t0) / width))
        acc = sums.setdefault(k, [0.0, 0])
        acc[0] += float(m)
        acc[1] += 1
    return [(k, total / count) for k, (total, count) in sums.items()]


@dataclass
class RawRecord:
    subject_id: str
    timestamp: datetime
    lat: float
    lon: float
    mag: float
    covariates: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.timestamp.tzinfo is None:
            self.timestamp = self.timestamp.replace(tzinfo=timezone.utc)
        if not self.mag >= 0:
            raise ValueError(f"{self.subject_id} @ {self.timestamp.isoformat()}: mag must be nonnegative, got {self.mag}")
        if not -90 <= self.lat <= 90 or not -180 <= self.lon <= 180:
            raise ValueError(f"{self.subject_id} @ {self.timestamp.isoformat()}: coordinates ({self.lat}, {self.lon}) out of range")


@dataclass
class PreprocessRules:
    min_mag: float = 0.05
    max_gap_s: float = 180.0
    min_duration_s: float = 300.0
    max_duration_s: float = 1320.0
    truncate_s: float = 1200.0
    epoch_s: float = EPOCH_SECONDS


@dataclass
class EpochObs:
    t: int  # 1-based relative epoch
    mag: float
    lat: float
    lon: float
    covariates: dict[str, float]

    @property
    def y(self) -> float:
        return math.log(self.mag)


@dataclass
class Trajectory:
    subject_id: str
    date: date
    start: datetime
    epochs: list[EpochObs]

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.subject_id, self.date.isoformat(), self.start.isoformat())

    @property
    def last_epoch(self) -> int:
        return self.epochs[-1].t

    def present(self, T: int = HORIZON) -> np.ndarray:
        mask = np.zeros(T, dtype=bool)
        mask[[e.t - 1 for e in self.epochs if e.t <= T]] = True
        return mask


def _merge(t: int, group: Sequence[RawRecord]) -> EpochObs:
    # records rounding onto the same epoch are averaged
    n = len(group)
    keys = sorted(set().union(*(r.covariates for r in group)))
    cov = {k: sum(r.covariates.get(k, math.nan) for r in group) / n for k in keys}
    return EpochObs(t, sum(r.mag for r in group) / n, sum(r.lat for r in group) / n,
                    sum(r.lon for r in group) / n, cov)


def _to_trajectory(seg: list[RawRecord], rules: PreprocessRules) -> Trajectory | None:
    t0 = seg[0].timestamp
    duration = (seg[-1].timestamp - t0).total_seconds()
    if duration < rules.min_duration_s or duration > rules.max_duration_s:
        return None
    by_epoch: dict[int, list[RawRecord]] = {}
    for r in seg:
        off = (r.timestamp - t0).total_seconds()
        if off > rules.truncate_s:
            break
        by_epoch.setdefault(int(round(off / rules.epoch_s)) + 1, []).append(r)
    epochs = [_merge(t, grp) for t, grp in sorted(by_epoch.items())]
    return Trajectory(seg[0].subject_id, t0.date(), t0, epochs)


def preprocess_trajectories(records: Iterable[RawRecord], rules: PreprocessRules | None = None) -> list[Trajectory]:
    """Filter, split, length-screen and truncate activity into trajectories.

    Records are grouped per (subject, UTC date) and sorted by time.  Low-MAG
    records are dropped first, then a new trajectory starts wherever
    consecutive records are more than ``max_gap_s`` apart.  Trajectories
    shorter than ``min_duration_s`` or longer than ``max_duration_s`` are
    dropped and survivors are cut at ``truncate_s``.  Output is ordered by
    (subject, start).
    """
    rules = rules or PreprocessRules()
    groups: dict[tuple[str, date], list[RawRecord]] = {}
    for r in records:
        if r.mag < rules.min_mag:
            continue
        groups.setdefault((r.subject_id, r.timestamp.date()), []).append(r)
    out = []
    for key in sorted(groups):
        recs = sorted(groups[key], key=lambda r: r.timestamp)
        seg = [recs[0]]
        for prev, cur in zip(recs, recs[1:]):
            if (cur.timestamp - prev.timestamp).total_seconds() > rules.max_gap_s:
                out.append(seg)
                seg = []
            seg.append(cur)
        out.append(seg)
    trajs = [tr for tr in (_to_trajectory(s, rules) for s in out) if tr is not None]
    trajs.sort(key=lambda tr: (tr.subject_id, tr.start))
    return trajs


def _parse_time(text: str) -> datetime:
    ts = datetime.fromisoformat(text.strip().replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def read_records(path: str | Path) -> list[RawRecord]:
    """Load records from CSV: subject_id, timestamp (ISO-8601), lat, lon, mag, then covariates."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in RECORD_FIELDS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        extra = [c for c in reader.fieldnames if c not in RECORD_FIELDS]
        for line, row in enumerate(reader, start=2):
            try:
                cov = {c: float(row[c]) for c in extra if row[c] not in ("", None)}
                records.append(RawRecord(row["subject_id"], _parse_time(row["timestamp"]), float(row["lat"]),
                                         float(row["lon"]), float(row["mag"]), cov))
            except ValueError as err:
                raise ValueError(f"{path}:{line}: {err}") from None
    return records


def write_records(path: str | Path, records: Sequence[RawRecord]) -> None:
    extra = sorted(set().union(*(r.covariates for r in records))) if records else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(RECORD_FIELDS) + extra)
        for r in records:
            w.writerow([r.subject_id, r.timestamp.isoformat(), repr(r.lat), repr(r.lon), repr(r.mag)]
                       + [repr(r.covariates[c]) if c in r.covariates else "" for c in extra])


def write_trajectories(path: str | Path, trajs: Sequence[Trajectory]) -> None:
    """Flat CSV of surviving trajectory epochs (one row per epoch)."""
    cols = sorted(set().union(*(e.covariates for tr in trajs for e in tr.epochs))) if trajs else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "date", "start", "t", "mag", "log_mag", "lat", "lon"] + cols)
        for tr in trajs:
            for e in tr.epochs:
                w.writerow([tr.subject_id, tr.date.isoformat(), tr.start.isoformat(), e.t, repr(e.mag), repr(e.y),
                            repr(e.lat), repr(e.lon)] + [repr(e.covariates.get(c, math.nan)) for c in cols])
