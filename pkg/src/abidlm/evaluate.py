"""Tidy interval tables and coverage reports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

INTERVAL_FIELDS = ["t", "coef", "lower", "mean", "upper", "source"]
SOURCES = ("FF", "FFBS", "ABI")


@dataclass(frozen=True)
class IntervalRow:
    t: int
    coef: str
    lower: float
    mean: float
    upper: float
    source: str


def interval_rows(lower, mean, upper, source: str) -> list[IntervalRow]:
    """Rows for ``(T, p)`` bound arrays; epochs and coefficients are 1-based."""
    if source not in SOURCES:
        raise ValueError(f"unknown interval source {source!r}")
    lower, mean, upper = (np.asarray(a, dtype=float) for a in (lower, mean, upper))
    T, p = mean.shape
    return [IntervalRow(t + 1, str(j + 1), float(lower[t, j]), float(mean[t, j]), float(upper[t, j]), source)
            for t in range(T) for j in range(p)]


def write_intervals(path: str | Path, rows: Iterable[IntervalRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(INTERVAL_FIELDS)
        for r in rows:
            w.writerow([r.t, r.coef, repr(r.lower), repr(r.mean), repr(r.upper), r.source])


def read_intervals(path: str | Path) -> list[IntervalRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != INTERVAL_FIELDS:
            raise ValueError(f"{path}: expected columns {INTERVAL_FIELDS}, got {reader.fieldnames}")
        return [IntervalRow(int(r["t"]), r["coef"], float(r["lower"]), float(r["mean"]), float(r["upper"]), r["source"])
                for r in reader]


def write_truth(path: str | Path, beta: np.ndarray, sigma2: float | None = None) -> None:
    """True-parameter table ``t, coef, value``; sigma2 appears under coef ``sigma2``."""
    T, p = beta.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "coef", "value"])
        for t in range(T):
            for j in range(p):
                w.writerow([t + 1, j + 1, repr(float(beta[t, j]))])
            if sigma2 is not None:
                w.writerow([t + 1, "sigma2", repr(float(sigma2))])


def read_truth(path: str | Path) -> dict[tuple[int, str], float]:
    with open(path, newline="") as fh:
        return {(int(r["t"]), r["coef"]): float(r["value"]) for r in csv.DictReader(fh)}


@dataclass
class SourceReport:
    source: str
    n: int
    coverage: float
    mean_width: float


def coverage_report(rows: Sequence[IntervalRow], truth: dict[tuple[int, str], float]) -> dict:
    """Per-source coverage and width, plus the ABI/FFBS width ratio when both exist.

    Every interval key must be present in the truth table.
    """
    missing = sorted({(r.t, r.coef) for r in rows} - set(truth))
    if missing:
        raise KeyError(f"{len(missing)} interval keys have no truth value, first {missing[0]}")
    by_source: dict[str, list[IntervalRow]] = {}
    for r in rows:
        by_source.setdefault(r.source, []).append(r)
    reports = []
    for src in sorted(by_source):
        rs = by_source[src]
        lo = np.array([r.lower for r in rs])
        hi = np.array([r.upper for r in rs])
        val = np.array([truth[(r.t, r.coef)] for r in rs])
        reports.append(SourceReport(src, len(rs), float(np.mean((lo <= val) & (val <= hi))), float(np.mean(hi - lo))))
    out = {"sources": [vars(r) for r in reports]}
    widths = {r.source: r.mean_width for r in reports}
    if "ABI" in widths and "FFBS" in widths and widths["FFBS"] > 0:
        out["width_ratio_abi_ffbs"] = widths["ABI"] / widths["FFBS"]
    return out


def write_report(report: dict, json_path: str | Path, csv_path: str | Path) -> None:
    Path(json_path).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "n", "coverage", "mean_width"])
        for r in report["sources"]:
            w.writerow([r["source"], r["n"], repr(r["coverage"]), repr(r["mean_width"])])
