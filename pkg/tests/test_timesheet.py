import math
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from abidlm.dlm import DrawSet
from abidlm.rng import Rng
from abidlm.timesheet.geo import EARTH_RADIUS_M, haversine, interpolate_geo, radial_average
from abidlm.timesheet.impute import impute_covariates, impute_outcomes
from abidlm.timesheet.preprocess import (PreprocessRules, RawRecord, epoch_average_mag, mag, preprocess_trajectories,
                                         read_records, write_records)
from abidlm.timesheet.sheet import (build_timesheet, frac_day, read_bundle, scale_covariates,
                                    unscale_covariates, write_bundle)
from abidlm.timesheet.synthetic import SyntheticConfig, imputed_fraction, synthetic_timesheet

T0 = datetime(2024, 5, 1, 15, 0, tzinfo=timezone.utc)
COV = {"Age": 40.0, "BMI": 25.0, "Sex": 1.0, "NDVI": 0.3}


def burst(subject, start, seconds, step=20, mag_value=0.5, lat=34.0, lon=-118.0, cov=None):
    return [RawRecord(subject, start + timedelta(seconds=s), lat, lon, mag_value, dict(cov or COV))
            for s in range(0, seconds + 1, step)]


# geo

def test_haversine_examples():
    assert haversine((10.0, 20.0), (10.0, 20.0)) == 0.0
    assert haversine((0.0, 0.0), (0.0, 1.0)) == pytest.approx(2 * math.pi * EARTH_RADIUS_M / 360, abs=1e-6)
    assert abs(haversine((0.0, 0.0), (0.0, 1.0)) - 111_195) < 1


@settings(max_examples=100, deadline=None)
@given(a=st.tuples(st.floats(-90, 90), st.floats(-180, 180)), b=st.tuples(st.floats(-90, 90), st.floats(-180, 180)))
def test_haversine_symmetric(a, b):
    assert haversine(a, b) == haversine(b, a)


def test_interpolate_geo():
    epochs, coords = [1, 5, 9], np.array([[0.0, 0.0], [4.0, 8.0], [6.0, 0.0]])
    np.testing.assert_allclose(interpolate_geo(epochs, coords, 3), [2.0, 4.0])
    np.testing.assert_allclose(interpolate_geo(epochs, coords, 7), [5.0, 4.0])
    np.testing.assert_array_equal(interpolate_geo(epochs, coords, 5), coords[1])
    np.testing.assert_allclose(interpolate_geo(epochs, coords, 1 + 1e-9), coords[0], atol=1e-8)
    for t in (0.5, 9.5):
        with pytest.raises(ValueError):
            interpolate_geo(epochs, coords, t)


def test_radial_average_examples():
    pts = np.array([[34.0, -118.0]])
    np.testing.assert_array_equal(radial_average((34.0, -118.0), pts, [[7.0, 2.0]]), [7.0, 2.0])
    d = 100 / 111_195
    two = np.array([[34.0 + d, -118.0], [34.0 - d, -118.0]])
    assert radial_average((34.0, -118.0), two, [[1.0], [3.0]])[0] == pytest.approx(2.0, abs=1e-9)
    assert radial_average((0.0, 0.0), pts, [[1.0]]) is None
    three = np.array([[34.0, -118.0], [34.0005, -118.0], [34.0, -118.001]])
    vals = np.array([[1.0], [2.0], [5.0]])
    dist = haversine(np.array([34.0001, -118.0002]), three)
    w = np.exp(-dist**2 / (2 * 200.0**2)) * (dist < 200)
    expected = (w @ vals) / w.sum()
    np.testing.assert_allclose(radial_average((34.0001, -118.0002), three, vals), expected, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_radial_average_in_convex_hull(seed):
    rng = Rng(seed)
    pts = np.column_stack([34 + 0.002 * rng.normal(8), -118 + 0.002 * rng.normal(8)])
    vals = rng.normal((8, 3))
    out = radial_average((34.0, -118.0), pts, vals, 300.0)
    if out is not None:
        inside = haversine(np.array([34.0, -118.0]), pts) < 300
        assert np.all(out >= vals[inside].min(axis=0) - 1e-12)
        assert np.all(out <= vals[inside].max(axis=0) + 1e-12)


# preprocessing

def test_epoch_average_mag():
    assert epoch_average_mag([(0.0, 0.3), (5.0, 0.3), (19.9, 0.3)]) == [(0, pytest.approx(0.3))]
    two = [(i / 1.5, 0.1) for i in range(30)] + [(20 + i / 1.5, 0.2) for i in range(30)]
    out = epoch_average_mag(two)
    assert [k for k, _ in out] == [0, 1]
    assert out[0][1] == pytest.approx(0.1) and out[1][1] == pytest.approx(0.2)
    assert mag(3, 4, 0) == 5.0
    with pytest.raises(ValueError):
        epoch_average_mag([(5.0, 0.1), (1.0, 0.1)])


def test_record_validation():
    with pytest.raises(ValueError):
        RawRecord("s", T0, 0.0, 0.0, -0.1)
    with pytest.raises(ValueError):
        RawRecord("s", T0, 95.0, 0.0, 0.1)
    assert RawRecord("s", datetime(2024, 1, 1), 0, 0, 0.1).timestamp.tzinfo is not None


def test_gap_split_and_duration_rules():
    recs = burst("a", T0, 360) + burst("a", T0 + timedelta(seconds=360 + 240), 360)
    trajs = preprocess_trajectories(recs)
    assert len(trajs) == 2
    assert preprocess_trajectories(burst("b", T0, 180)) == []
    assert preprocess_trajectories(burst("b", T0, 1400)) == []
    cut = preprocess_trajectories(burst("c", T0, 21 * 60))
    assert len(cut) == 1 and cut[0].last_epoch == 61 and len(cut[0].epochs) == 61


def test_low_mag_records_dropped():
    recs = burst("a", T0, 400)
    recs[3].mag = 0.01
    (tr,) = preprocess_trajectories(recs)
    assert all(e.mag >= 0.05 for e in tr.epochs)
    assert 4 not in [e.t for e in tr.epochs]
    assert tr.epochs[0].y == pytest.approx(math.log(0.5))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_preprocess_output_invariants(seed):
    rng = Rng(seed)
    recs, t = [], T0
    for _ in range(6):
        t += timedelta(seconds=float(rng.uniform(0, 600)))
        n = int(rng.gen.integers(5, 80))
        for _ in range(n):
            t += timedelta(seconds=float(rng.uniform(5, 40)))
            recs.append(RawRecord("s", t, 34.0, -118.0, float(rng.uniform(0, 1))))
    rules = PreprocessRules()
    for tr in preprocess_trajectories(recs, rules):
        ts = [e.t for e in tr.epochs]
        assert ts == sorted(set(ts)) and ts[0] == 1 and ts[-1] <= 61
        assert all(e.mag >= rules.min_mag for e in tr.epochs)
        assert (ts[-1] - 1) * 20 <= 1200


def test_records_csv_round_trip(tmp_path):
    recs = burst("a", T0, 60)
    write_records(tmp_path / "r.csv", recs)
    back = read_records(tmp_path / "r.csv")
    assert back == recs


# timesheet

def test_single_five_minute_trajectory():
    (tr,) = preprocess_trajectories(burst("a", T0, 300))
    ts = build_timesheet([tr])
    assert ts.T == 61 and ts.n_rows == 1
    assert ts.mask[0, :16].all() and not ts.mask[0, 16:].any()
    assert ts.observed_counts().sum() == ts.mask.sum() == 16
    assert ts.columns[:4] == ["Age", "BMI", "Sex", "frac_day_0"]
    assert ts.covariates[0, 0, 3] == pytest.approx(frac_day(T0))


def test_empty_timesheet_and_duplicate_keys():
    ts = build_timesheet([])
    assert ts.T == 61 and ts.n_rows == 0
    (tr,) = preprocess_trajectories(burst("a", T0, 300))
    with pytest.raises(ValueError):
        build_timesheet([tr, tr])


def test_frac_day():
    assert frac_day(datetime(2024, 1, 1, 7, 0)) == 0.0
    assert frac_day(datetime(2024, 1, 1, 23, 0)) == 1.0
    assert frac_day(datetime(2024, 1, 1, 22, 0), utc_offset_hours=-7) == pytest.approx(0.5)


def test_scaling_moments_and_inverse():
    ts = synthetic_timesheet(Rng(3))
    scaled, sc = scale_covariates(ts)
    m = ts.mask
    for t in range(ts.T):
        obs = scaled.covariates[m[:, t], t, :]
        if obs.shape[0] < 2:
            continue
        assert np.abs(obs.mean(axis=0)).max() < 1e-12
        raw_sd = ts.covariates[m[:, t], t, :].std(axis=0)
        varying = raw_sd > 1e-12
        np.testing.assert_allclose(obs[:, varying].var(axis=0), 1.0, atol=1e-10)
    np.testing.assert_allclose(unscale_covariates(scaled).covariates, ts.covariates, atol=1e-12, equal_nan=True)


def test_single_row_epoch_scales_to_zero():
    (tr,) = preprocess_trajectories(burst("a", T0, 300))
    scaled, sc = scale_covariates(build_timesheet([tr]))
    assert np.all(scaled.covariates[0, :16] == 0.0)
    assert np.all(sc.scale == 1.0)


def test_bundle_round_trip(tmp_path):
    ts, _ = scale_covariates(synthetic_timesheet(Rng(4)))
    files = write_bundle(ts, tmp_path / "b")
    assert {f.name for f in files} >= {"outcomes.csv", "mask.csv", "manifest.json", "covariates_t1.csv"}
    back = read_bundle(tmp_path / "b")
    assert back.keys == ts.keys and back.columns == ts.columns
    np.testing.assert_array_equal(back.y, ts.y)
    np.testing.assert_array_equal(back.covariates, ts.covariates)
    np.testing.assert_array_equal(back.coords, ts.coords)
    np.testing.assert_array_equal(back.scaler.mean, ts.scaler.mean)


# imputation

def _sheet_with_gap(gap_lat=34.0):
    recs = burst("a", T0, 300, lat=34.0, lon=-118.0)
    del recs[5]
    recs += burst("b", T0 + timedelta(hours=1), 300, lat=34.0, lon=-118.0, cov={**COV, "NDVI": 0.5})
    return build_timesheet(preprocess_trajectories(recs))


def test_impute_interior_gap_at_same_location():
    ts = _sheet_with_gap()
    imp = impute_covariates(ts)
    assert imp.n_cells == 1 and imp.rows[5].tolist() == [0]
    x = imp.X[5][0]
    cols = ts.columns
    assert x[cols.index("Age")] == 40.0 and x[cols.index("frac_day_0")] == ts.covariates[0, 0, cols.index("frac_day_0")]
    pool = ts.covariates[ts.mask][:, cols.index("NDVI")]
    assert x[cols.index("NDVI")] == pytest.approx(pool.mean(), abs=1e-12)
    np.testing.assert_allclose(imp.coords[5][0], [34.0, -118.0])


def test_fully_observed_rows_need_no_imputation():
    ts = build_timesheet(preprocess_trajectories(burst("a", T0, 300)))
    assert impute_covariates(ts).n_cells == 0


def test_radius_widening_and_drop():
    ts = _sheet_with_gap()
    ts.covariates[0, :, ts.columns.index("NDVI")] = np.nan
    assert impute_covariates(ts, r_s=200).radius[5][0] == 200.0
    ts.coords[1, :, 0] += 300 / 111_195
    imp = impute_covariates(ts, r_s=200)
    assert imp.radius[5][0] == 400.0
    assert imp.X[5][0][ts.columns.index("NDVI")] == pytest.approx(0.5)
    ts.coords[1, :, 0] += 5000 / 111_195
    imp = impute_covariates(ts, r_s=200)
    assert imp.n_cells == 0 and imp.dropped == [(0, 6)]


def test_missing_constant_column_raises():
    ts = _sheet_with_gap()
    ts.covariates[0, 0, ts.columns.index("Age")] = np.nan
    with pytest.raises(ValueError, match="Age"):
        impute_covariates(ts)


def test_impute_outcomes_limits():
    rng = Rng(5)
    beta = rng.normal((40, 2, 3))
    draws = DrawSet(beta, np.full(40, 0.5))
    X = [rng.normal((4, 3)), np.zeros((0, 3))]
    out = impute_outcomes(draws, X, [1e-30 * np.eye(4), np.zeros((0, 0))], rng)
    np.testing.assert_allclose(out.samples[0], beta[:, 0] @ X[0].T, atol=1e-12)
    assert out.samples[1].shape == (40, 0)
    one = impute_outcomes(DrawSet(beta[:1], np.ones(1)), X, None, rng)
    np.testing.assert_array_equal(one.lower[0], one.samples[0][0])
    np.testing.assert_array_equal(one.upper[0], one.samples[0][0])


def test_synthetic_masking_share():
    ts = synthetic_timesheet(Rng(8), SyntheticConfig())
    assert 0.14 < imputed_fraction(ts) < 0.21
