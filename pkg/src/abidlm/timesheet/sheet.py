"""The actigraph timesheet: trajectories aligned on a relative epoch grid."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .preprocess import EPOCH_SECONDS, HORIZON, Trajectory

BUNDLE_FORMAT = "abidlm.timesheet"
BUNDLE_VERSION = 1
DEFAULT_CONSTANT = ("Age", "BMI", "Sex", "frac_day_0")
DAY_START_H, DAY_END_H = 7.0, 23.0
KEY_FIELDS = ["subject_id", "date", "start"]


def frac_day(start, utc_offset_hours: float = 0.0) -> float:
    """Position of a start time inside the 7am-11pm window (0 at 7am, 1 at 11pm)."""
    hours = start.hour + start.minute / 60 + (start.second + start.microsecond / 1e6) / 3600 + utc_offset_hours
    return ((hours % 24.0) - DAY_START_H) / (DAY_END_H - DAY_START_H)


@dataclass
class Scaler:
    """Per (epoch, column) centering and scaling learned on observed cells."""

    mean: np.ndarray  # (T, K)
    scale: np.ndarray  # (T, K)

    def apply(self, cov: np.ndarray, t: int | None = None) -> np.ndarray:
        if t is None:
            return (cov - self.mean) / self.scale
        return (cov - self.mean[t - 1]) / self.scale[t - 1]

    def invert(self, cov: np.ndarray, t: int | None = None) -> np.ndarray:
        if t is None:
            return cov * self.scale + self.mean
        return cov * self.scale[t - 1] + self.mean[t - 1]

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["scale"], dtype=float))


@dataclass
class Timesheet:
    keys: list[tuple[str, str, str]]
    columns: list[str]
    y: np.ndarray  # (R, T), NaN where unobserved
    coords: np.ndarray  # (R, T, 2), NaN where unobserved
    covariates: np.ndarray  # (R, T, K), NaN where unobserved
    constant_columns: list[str] = field(default_factory=list)
    T: int = HORIZON
    scaler: Scaler | None = None

    def __post_init__(self):
        R = len(self.keys)
        self.y = np.asarray(self.y, dtype=float).reshape(R, self.T)
        self.coords = np.asarray(self.coords, dtype=float).reshape(R, self.T, 2)
        self.covariates = np.asarray(self.covariates, dtype=float).reshape(R, self.T, len(self.columns))
        if len(set(self.keys)) != R:
            raise ValueError("duplicate (subject, date, start) keys")

    @property
    def mask(self) -> np.ndarray:
        return ~np.isnan(self.y)

    @property
    def n_rows(self) -> int:
        return len(self.keys)

    def observed_counts(self) -> np.ndarray:
        """n_{t,o} for t = 1..T."""
        return self.mask.sum(axis=0)

    def last_observed(self) -> np.ndarray:
        """Last observed epoch (1-based) of each row, 0 for empty rows."""
        m = self.mask
        idx = self.T - np.argmax(m[:, ::-1], axis=1)
        return np.where(m.any(axis=1), idx, 0)

    @property
    def location_columns(self) -> list[str]:
        return [c for c in self.columns if c not in self.constant_columns]

    def observed_rows(self, t: int) -> np.ndarray:
        return np.flatnonzero(self.mask[:, t - 1])

    def design(self, t: int, rows: np.ndarray | None = None, intercept: bool = True) -> np.ndarray:
        """Design matrix for epoch t over ``rows`` (default: observed rows)."""
        rows = self.observed_rows(t) if rows is None else rows
        X = self.covariates[rows, t - 1, :]
        if intercept:
            X = np.column_stack([np.ones(len(rows)), X])
        return X

    def outcomes(self, t: int) -> np.ndarray:
        return self.y[self.observed_rows(t), t - 1]


def build_timesheet(trajs: Sequence[Trajectory], T: int = HORIZON, constant_columns=DEFAULT_CONSTANT,
                    utc_offset_hours: float = 0.0) -> Timesheet:
    """Align trajectories on the relative epoch grid, one row per trajectory.

    Epoch 1 is each trajectory's start.  The start time of day is added as
    the constant column ``frac_day_0``.
    """
    keys = [tr.key for tr in trajs]
    seen = set()
    for k in keys:
        if k in seen:
            raise ValueError(f"duplicate timesheet key {k}")
        seen.add(k)
    names = set()
    for tr in trajs:
        for e in tr.epochs:
            names.update(e.covariates)
    names.add("frac_day_0")
    const = [c for c in constant_columns if c in names]
    columns = const + sorted(names - set(const))
    R, K = len(trajs), len(columns)
    y = np.full((R, T), np.nan)
    coords = np.full((R, T, 2), np.nan)
    cov = np.full((R, T, K), np.nan)
    fd = columns.index("frac_day_0")
    for r, tr in enumerate(trajs):
        f0 = frac_day(tr.start, utc_offset_hours)
        for e in tr.epochs:
            if e.t > T:
                continue
            y[r, e.t - 1] = e.y
            coords[r, e.t - 1] = (e.lat, e.lon)
            for k, c in enumerate(columns):
                cov[r, e.t - 1, k] = e.covariates.get(c, math.nan)
            cov[r, e.t - 1, fd] = f0
    return Timesheet(keys, columns, y, coords, cov, const, T)


def fit_scaler(ts: Timesheet) -> Scaler:
    T, K = ts.T, len(ts.columns)
    mean = np.zeros((T, K))
    scale = np.ones((T, K))
    m = ts.mask
    for t in range(T):
        obs = ts.covariates[m[:, t], t, :]
        if obs.shape[0] == 0:
            continue
        mu = obs.mean(axis=0)
        sd = obs.std(axis=0)
        mean[t] = mu
        tiny = sd <= 1e-12 * np.maximum(1.0, np.abs(mu))
        scale[t] = np.where(tiny, 1.0, sd)
    return Scaler(mean, scale)


def scale_covariates(ts: Timesheet) -> tuple[Timesheet, Scaler]:
    """Center and scale every (epoch, column) over its observed cells.

    Uses the population standard deviation so the scaled column has unit
    variance; constant columns keep divisor 1.
    """
    sc = fit_scaler(ts)
    return replace(ts, covariates=sc.apply(ts.covariates), scaler=sc), sc


def unscale_covariates(ts: Timesheet) -> Timesheet:
    if ts.scaler is None:
        return ts
    return replace(ts, covariates=ts.scaler.invert(ts.covariates), scaler=None)


def _cell(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def _read_cell(s: str) -> float:
    return math.nan if s == "" else float(s)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_bundle(ts: Timesheet, directory: str | Path) -> list[Path]:
    """Write outcomes.csv, mask.csv, covariates_t<k>.csv and manifest.json."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    epochs = [f"t{k}" for k in range(1, ts.T + 1)]
    written = []
    with open(d / "outcomes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(KEY_FIELDS + epochs)
        for key, row in zip(ts.keys, ts.y):
            w.writerow(list(key) + [_cell(v) for v in row])
    written.append(d / "outcomes.csv")
    with open(d / "mask.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(KEY_FIELDS + epochs)
        for key, row in zip(ts.keys, ts.mask):
            w.writerow(list(key) + [int(v) for v in row])
    written.append(d / "mask.csv")
    for t in range(1, ts.T + 1):
        path = d / f"covariates_t{t}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(KEY_FIELDS + ["lat", "lon"] + ts.columns)
            for r, key in enumerate(ts.keys):
                w.writerow(list(key) + [_cell(v) for v in ts.coords[r, t - 1]]
                           + [_cell(v) for v in ts.covariates[r, t - 1]])
        written.append(path)
    manifest = {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "T": ts.T,
        "epoch_seconds": EPOCH_SECONDS,
        "rows": ts.n_rows,
        "columns": ts.columns,
        "constant_columns": ts.constant_columns,
        "scaler": ts.scaler.to_dict() if ts.scaler is not None else None,
    }
    _atomic_write(d / "manifest.json", json.dumps(manifest, indent=1) + "\n")
    written.append(d / "manifest.json")
    return written


def read_bundle(directory: str | Path) -> Timesheet:
    d = Path(directory)
    man = json.loads((d / "manifest.json").read_text())
    if man.get("format") != BUNDLE_FORMAT or man.get("version") != BUNDLE_VERSION:
        raise ValueError(f"{d}: not a version {BUNDLE_VERSION} timesheet bundle")
    T, columns = int(man["T"]), list(man["columns"])
    keys, y = [], []
    with open(d / "outcomes.csv", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            keys.append(tuple(row[:3]))
            y.append([_read_cell(v) for v in row[3:]])
    R = len(keys)
    if R != man["rows"]:
        raise ValueError(f"{d}: manifest lists {man['rows']} rows, outcomes.csv has {R}")
    coords = np.full((R, T, 2), np.nan)
    cov = np.full((R, T, len(columns)), np.nan)
    for t in range(1, T + 1):
        with open(d / f"covariates_t{t}.csv", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[5:] != columns:
                raise ValueError(f"{d}/covariates_t{t}.csv: columns do not match the manifest")
            for r, row in enumerate(reader):
                if tuple(row[:3]) != keys[r]:
                    raise ValueError(f"{d}/covariates_t{t}.csv: row {r + 1} key {tuple(row[:3])} != {keys[r]}")
                vals = [_read_cell(v) for v in row[3:]]
                coords[r, t - 1] = vals[:2]
                cov[r, t - 1] = vals[2:]
    ts = Timesheet(keys, columns, np.array(y, dtype=float).reshape(R, T), coords, cov,
                   list(man["constant_columns"]), T,
                   Scaler.from_dict(man["scaler"]) if man.get("scaler") else None)
    with open(d / "mask.csv", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        mask = np.array([[v == "1" for v in row[3:]] for row in reader], dtype=bool).reshape(R, T)
    if not np.array_equal(mask, ts.mask):
        raise ValueError(f"{d}: mask.csv disagrees with the stored outcomes")
    return ts
