import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from abidlm.conjugate import normal_gamma_posterior
from abidlm.dlm import (DimensionError, DlmError, DlmSpec, DrawSet, SingularMatrixError, backward_sample, dlm_prior_draw,
                        ffbs, forward_filter, read_observations, smoothing_marginal, write_observations, y_from_dlm)
from abidlm.rng import Rng

from helpers import random_spec, simulate_y, spd


def hand_spec():
    return DlmSpec(X=[np.ones((1, 1))], G=[np.eye(1)], V=[np.eye(1)], W=[np.zeros((1, 1))],
                   m0=np.zeros(1), M0=np.eye(1), a0=3.0, b0=1.0)


def test_forward_filter_hand_example():
    fs = forward_filter(hand_spec(), [np.array([2.0])])
    assert fs.c[0, 0] == 0.0 and fs.C[0, 0, 0] == 1.0
    assert fs.q[0][0] == 0.0 and fs.Q[0][0, 0] == 2.0
    assert fs.m[0, 0] == pytest.approx(1.0, abs=1e-15)
    assert fs.M[0, 0, 0] == pytest.approx(0.5, abs=1e-15)
    assert fs.a[0] == 3.5 and fs.b[0] == pytest.approx(2.0, abs=1e-15)


def test_smoothing_interval_hand_example():
    spec = hand_spec()
    lo, hi = smoothing_marginal(forward_filter(spec, [np.array([2.0])]), spec).intervals(0.95)
    half = stats.t.ppf(0.975, 7) * np.sqrt((2 / 3.5) * 0.5)
    assert lo[0, 0] == pytest.approx(1 - half, abs=1e-12)
    assert hi[0, 0] == pytest.approx(1 + half, abs=1e-12)


def test_no_data_propagates_prior():
    rng = Rng(1)
    spec = random_spec(rng, 4, 2, 0)
    fs = forward_filter(spec, [np.zeros(0)] * 4)
    c = spec.m0
    for t in range(4):
        c = spec.G[t] @ c
        np.testing.assert_allclose(fs.m[t], c, atol=1e-12)
        np.testing.assert_allclose(fs.m[t], fs.c[t], atol=0)
    assert fs.aT == spec.a0 and fs.bT == spec.b0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), T=st.integers(1, 6), p=st.integers(1, 3))
def test_filter_invariants(seed, T, p):
    rng = Rng(seed)
    n = [int(k) for k in rng.gen.integers(0, 5, size=T)]
    spec = random_spec(rng, T, p, n)
    _, _, y = simulate_y(spec, rng)
    fs = forward_filter(spec, y)
    prev = np.concatenate([[spec.a0], fs.a[:-1]])
    np.testing.assert_array_equal(fs.a, prev + 0.5 * np.array(n))
    assert fs.aT - spec.a0 == pytest.approx(0.5 * sum(n), abs=1e-12)
    assert np.all(np.diff(np.concatenate([[spec.b0], fs.b])) >= 0)
    for A in list(fs.C) + list(fs.M):
        assert np.abs(A - A.T).max() < 1e-10
        np.linalg.cholesky(A)
    sm = smoothing_marginal(fs, spec)
    np.testing.assert_array_equal(sm.s[-1], fs.m[-1])
    np.testing.assert_array_equal(sm.S[-1], fs.M[-1])


def test_dimension_error_names_epoch():
    spec = random_spec(Rng(2), 3, 2, 2)
    with pytest.raises(DimensionError) as err:
        forward_filter(spec, [np.zeros(2), np.zeros(3), np.zeros(2)])
    assert err.value.epoch == 2


def test_singular_q_names_epoch():
    spec = random_spec(Rng(3), 2, 1, 1, zero_noise=True)
    spec.V[1][:] = 0.0
    spec.X[1][:] = 0.0
    with pytest.raises(SingularMatrixError) as err:
        forward_filter(spec, [np.zeros(1), np.zeros(1)])
    assert err.value.epoch == 2


def test_spec_validation():
    with pytest.raises(DlmError):
        DlmSpec.standard([np.ones((1, 1))], a0=-1.0)
    with pytest.raises(DimensionError):
        DlmSpec(X=[np.ones((1, 2))], G=[np.eye(3)], V=[np.eye(1)], W=[np.eye(2)], m0=np.zeros(2), M0=np.eye(2),
                a0=1, b0=1)


def test_spec_json_round_trip(tmp_path):
    spec = random_spec(Rng(4), 3, 2, [2, 0, 3])
    spec.save(tmp_path / "spec.json")
    back = DlmSpec.load(tmp_path / "spec.json")
    assert json.dumps(back.to_dict()) == json.dumps(spec.to_dict())
    assert back.n == [2, 0, 3]


def test_t1_draws_are_normal_gamma():
    rng = Rng(5)
    spec = random_spec(rng, 1, 2, 4, a0=5.0, b0=2.0)
    _, _, y = simulate_y(spec, rng)
    fs = forward_filter(spec, y)
    sm = smoothing_marginal(fs, spec)
    np.testing.assert_array_equal(sm.s[0], fs.m[0])
    G, W = spec.G[0], spec.W[0]
    post = normal_gamma_posterior(spec.X[0], y[0], spec.V[0], G @ spec.m0, G @ spec.M0 @ G.T + W, spec.a0, spec.b0)
    L = 50_000
    d = ffbs(spec, y, Rng(6), L)
    lam = 1 / d.sigma2
    assert abs(lam.mean() - post.a / post.b) < 4 * lam.std() / np.sqrt(L)
    b = d.beta[:, 0]
    se = b.std(axis=0) / np.sqrt(L)
    assert np.all(np.abs(b.mean(axis=0) - post.m) < 4 * se)


def test_zero_state_noise_collapses_paths():
    rng = Rng(7)
    spec = random_spec(rng, 4, 2, 3)
    spec = DlmSpec(X=spec.X, G=[np.eye(2)] * 4, V=spec.V, W=[1e-12 * np.eye(2)] * 4, m0=spec.m0, M0=spec.M0,
                   a0=3.0, b0=1.0)
    _, _, y = simulate_y(spec, rng)
    d = ffbs(spec, y, Rng(8), 20)
    assert np.abs(d.beta - d.beta[:, -1:, :]).max() < 1e-4


def test_backward_means_match_smoother():
    rng = Rng(9)
    spec = random_spec(rng, 3, 2, 3, a0=4.0, b0=2.0)
    _, _, y = simulate_y(spec, rng)
    sm = smoothing_marginal(forward_filter(spec, y), spec)
    L = 50_000
    for joint in (True, False):
        d = ffbs(spec, y, Rng(10), L, joint=joint)
        se = d.beta.std(axis=0) / np.sqrt(L)
        assert np.all(np.abs(d.beta.mean(axis=0) - sm.s) < 4 * se)


def test_interval_brackets_sampler_quantiles():
    rng = Rng(11)
    spec = random_spec(rng, 3, 2, 3, a0=4.0, b0=2.0)
    _, _, y = simulate_y(spec, rng)
    lo, hi = smoothing_marginal(forward_filter(spec, y), spec).intervals(0.95)
    d = ffbs(spec, y, Rng(12), 50_000)
    q_lo, q_hi = np.quantile(d.beta, [0.025, 0.975], axis=0)
    width = hi - lo
    assert np.all(np.abs(q_lo - lo) < 0.03 * width)
    assert np.all(np.abs(q_hi - hi) < 0.03 * width)


def test_ffbs_empty_and_deterministic():
    rng = Rng(13)
    spec = random_spec(rng, 3, 2, 2)
    _, _, y = simulate_y(spec, rng)
    assert len(ffbs(spec, y, Rng(1), 0)) == 0
    with pytest.raises(DimensionError):
        ffbs(spec, y[:2], Rng(1), 0)
    a, b = ffbs(spec, y, Rng(14), 50), ffbs(spec, y, Rng(14), 50)
    assert a.beta.tobytes() == b.beta.tobytes() and a.sigma2.tobytes() == b.sigma2.tobytes()
    one = backward_sample(forward_filter(spec, y), spec, Rng(15))
    assert one.beta.shape == (3, 2) and one.sigma2 > 0


def test_prior_draw_degenerate_noise():
    spec = DlmSpec.standard([np.ones((1, 2))] * 3, W=[np.zeros((2, 2))] * 3)
    beta, sigma2 = dlm_prior_draw(spec, Rng(16))
    assert sigma2 > 0
    np.testing.assert_array_equal(beta[0], beta[1])
    np.testing.assert_array_equal(beta[1], beta[2])


def test_prior_draw_moments():
    rng = Rng(17)
    spec = random_spec(rng, 2, 2, 1, a0=5.0, b0=2.0)
    L = 50_000
    beta, sigma2 = dlm_prior_draw(spec, Rng(18), size=L)
    lam = 1 / sigma2
    assert abs(lam.mean() - spec.a0 / spec.b0) < 4 * lam.std() / np.sqrt(L)
    b1 = beta[:, 0]
    assert np.all(np.abs(b1.mean(axis=0) - spec.G[0] @ spec.m0) < 4 * b1.std(axis=0) / np.sqrt(L))


def test_y_from_dlm():
    rng = Rng(19)
    X = [rng.normal((3, 2)), np.zeros((0, 2))]
    beta = rng.normal((2, 2))
    quiet = y_from_dlm(beta, 1.0, X, [1e-18 * np.eye(3), np.zeros((0, 0))], 3, rng)
    assert len(quiet) == 3 and quiet[0][1].shape == (0,)
    np.testing.assert_allclose(quiet[0][0], X[0] @ beta[0], atol=1e-6)
    V = spd(rng, 3)
    L = 50_000
    ys = np.array([path[0] for path in y_from_dlm(beta[:1], 2.0, X[:1], [V], L, Rng(20))])
    cov = np.cov(ys.T)
    se = np.sqrt((V**2 + np.outer(np.diag(V), np.diag(V))) * 4 / L)
    assert np.all(np.abs(cov - 2.0 * V) < 5 * se)


def test_observation_csv_round_trip(tmp_path):
    spec = random_spec(Rng(21), 3, 1, [2, 0, 1])
    _, _, y = simulate_y(spec, Rng(22))
    write_observations(tmp_path / "y.csv", y)
    back = read_observations(tmp_path / "y.csv", spec)
    for a, b in zip(y, back):
        np.testing.assert_array_equal(a, b)


def test_drawset_save_is_deterministic(tmp_path):
    d = DrawSet(beta=Rng(23).normal((4, 3, 2)), sigma2=np.ones(4))
    d.save(tmp_path / "a.npz")
    d.save(tmp_path / "b.npz")
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    back = DrawSet.load(tmp_path / "a.npz")
    np.testing.assert_array_equal(back.beta, d.beta)
    assert back.sigma2_epoch is None
