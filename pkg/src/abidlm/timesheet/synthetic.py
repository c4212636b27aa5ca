"""Synthetic activity records shaped like a free-living accelerometer/GPS study."""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone

import numpy as np

from ..rng import Rng
from .geo import EARTH_RADIUS_M
from .preprocess import RawRecord, preprocess_trajectories
from .sheet import Timesheet, build_timesheet


@dataclass
class SyntheticConfig:
    n_subjects: int = 12
    trajs_per_subject: int = 4
    gap_rate: float = 0.068  # chance that a gap opens at an interior epoch
    max_gap: int = 6  # epochs; 6 x 20 s stays under the 3-minute split
    min_epochs: int = 16
    T: int = 61
    center: tuple[float, float] = (34.05, -118.25)
    spread_m: float = 1500.0
    speed_mps: float = 1.3
    first_day: str = "2019-03-04"


def _field(lat, lon, center):
    # smooth location-dependent covariates
    u = (lat - center[0]) * 100.0
    v = (lon - center[1]) * 100.0
    return {
        "Altitude": 90.0 + 25.0 * u - 10.0 * v + 4.0 * u * v,
        "Slope": 3.0 + 1.5 * np.sin(u) * np.cos(v),
        "NDVI": 0.3 + 0.1 * np.tanh(v - 0.5 * u),
        "DistToParks_km": 0.5 + 0.3 * abs(math.sin(u + 2 * v)),
    }


def _offset(lat, lon, north_m, east_m):
    dlat = math.degrees(north_m / EARTH_RADIUS_M)
    dlon = math.degrees(east_m / (EARTH_RADIUS_M * math.cos(math.radians(lat))))
    return lat + dlat, lon + dlon


def synthetic_records(rng: Rng, cfg: SyntheticConfig | None = None) -> list[RawRecord]:
    """Epoch-level records: one per 20 s along random walks, with short gaps."""
    cfg = cfg or SyntheticConfig()
    day0 = datetime.fromisoformat(cfg.first_day).replace(tzinfo=timezone.utc)
    records = []
    for s in range(cfg.n_subjects):
        sid = f"S{s + 1:03d}"
        age = float(np.round(rng.uniform(20, 75), 1))
        bmi = float(np.round(rng.uniform(18, 36), 1))
        sex = float(rng.uniform() < 0.5)
        home = _offset(*cfg.center, *(rng.normal(2) * cfg.spread_m))
        for j in range(cfg.trajs_per_subject):
            # one trajectory per subject-day keeps keys unique and days separate
            start = day0 + timedelta(days=j, seconds=float(np.round(rng.uniform(7 * 3600, 22.5 * 3600))))
            n_epochs = int(rng.gen.integers(cfg.min_epochs, cfg.T + 1))
            present = np.ones(n_epochs, dtype=bool)
            t = 1
            while t < n_epochs - 1:
                if rng.uniform() < cfg.gap_rate:
                    length = int(rng.gen.integers(1, cfg.max_gap + 1))
                    present[t:min(t + length, n_epochs - 1)] = False
                    t += length + 1
                else:
                    t += 1
            lat, lon = _offset(*home, *(rng.normal(2) * 300.0))
            heading = rng.uniform(0, 2 * math.pi)
            level = rng.normal() * 0.3
            for k in range(n_epochs):
                if k:
                    heading += 0.3 * rng.normal()
                    step = cfg.speed_mps * 20.0
                    lat, lon = _offset(lat, lon, step * math.cos(heading), step * math.sin(heading))
                    level = 0.8 * level + 0.2 * rng.normal()
                if not present[k]:
                    continue
                cov = {"Age": age, "BMI": bmi, "Sex": sex}
                cov.update({k2: float(v) for k2, v in _field(lat, lon, cfg.center).items()})
                from_home = EARTH_RADIUS_M * math.hypot(
                    math.radians(lat - home[0]), math.radians(lon - home[1]) * math.cos(math.radians(lat)))
                cov["DistFromHome_km"] = from_home / 1000.0
                m = 0.05 + math.exp(-1.5 + level)
                records.append(RawRecord(sid, start + timedelta(seconds=20 * k), lat, lon, m, cov))
    return records


def synthetic_timesheet(rng: Rng, cfg: SyntheticConfig | None = None) -> Timesheet:
    return build_timesheet(preprocess_trajectories(synthetic_records(rng, cfg)), T=(cfg or SyntheticConfig()).T)


def imputed_fraction(ts: Timesheet) -> float:
    """Share of cells strictly inside trajectory spans that are unobserved."""
    m = ts.mask
    last = ts.last_observed()
    inside = np.arange(1, ts.T + 1)[None, :] <= last[:, None]
    n_u = int((inside & ~m).sum())
    n_o = int(m.sum())
    return n_u / max(n_u + n_o, 1)
