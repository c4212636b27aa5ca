"""Covariate and outcome imputation for unobserved timesheet cells."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..dlm import DimensionError, DrawSet, psd_factor
from ..rng import Rng
from .geo import interpolate_geo, radial_average
from .sheet import Scaler, Timesheet


@dataclass
class ImputedCovariates:
    """Per-epoch imputed design rows X*_{t,u} on the raw covariate scale."""

    columns: list[str]
    rows: list[np.ndarray]  # per epoch: timesheet row indices
    X: list[np.ndarray]  # per epoch: (n_u, K)
    coords: list[np.ndarray]  # per epoch: (n_u, 2)
    radius: list[np.ndarray]  # per epoch: radius that produced each row
    dropped: list[tuple[int, int]] = field(default_factory=list)  # (row, epoch) left unimputed

    @property
    def T(self) -> int:
        return len(self.rows)

    @property
    def n_cells(self) -> int:
        return sum(len(r) for r in self.rows)

    def counts(self) -> np.ndarray:
        return np.array([len(r) for r in self.rows])

    def design(self, t: int, scaler: Scaler | None = None, intercept: bool = True) -> np.ndarray:
        X = self.X[t - 1]
        if scaler is not None:
            X = scaler.apply(X, t)
        if intercept:
            X = np.column_stack([np.ones(X.shape[0]), X])
        return X


def impute_covariates(ts: Timesheet, r_s: float = 200.0, widen: float = 2.0, max_widen: int = 3) -> ImputedCovariates:
    """Fill the covariates of unobserved cells strictly inside each trajectory's span.

    Constant columns are copied from the row's first observed epoch.
    Coordinates are interpolated linearly between the bracketing observed
    epochs and location columns are Gaussian radial averages over every
    observed cell in the timesheet.  When nothing lies within ``r_s`` the
    radius is multiplied by ``widen`` up to ``max_widen`` times; cells that
    still have no neighbours are reported in ``dropped``.
    """
    raw = ts.scaler.invert(ts.covariates) if ts.scaler is not None else ts.covariates
    mask = ts.mask
    const_idx = [ts.columns.index(c) for c in ts.constant_columns]
    loc_idx = [ts.columns.index(c) for c in ts.location_columns]
    pool_ok = mask & np.all(np.isfinite(ts.coords), axis=2)
    if loc_idx:
        pool_ok &= np.all(np.isfinite(raw[:, :, loc_idx]), axis=2)
    pool_pts = ts.coords[pool_ok]
    pool_vals = raw[pool_ok][:, loc_idx]

    K = len(ts.columns)
    rows = [[] for _ in range(ts.T)]
    xs = [[] for _ in range(ts.T)]
    cs = [[] for _ in range(ts.T)]
    radii = [[] for _ in range(ts.T)]
    dropped = []
    for r in range(ts.n_rows):
        obs = np.flatnonzero(mask[r])
        if obs.size < 2:
            continue
        gaps = [t for t in range(obs[0] + 1, obs[-1]) if not mask[r, t]]
        if not gaps:
            continue
        first = obs[0]
        const_vals = raw[r, first, const_idx]
        if np.any(~np.isfinite(const_vals)):
            bad = [ts.constant_columns[i] for i in np.flatnonzero(~np.isfinite(const_vals))]
            raise ValueError(f"row {ts.keys[r]}: missing subject-constant covariates {bad}")
        for t0 in gaps:
            pos = interpolate_geo(obs + 1, ts.coords[r, obs], t0 + 1)
            x = np.full(K, np.nan)
            x[const_idx] = const_vals
            radius = r_s
            if loc_idx:
                for attempt in range(max_widen + 1):
                    avg = radial_average(pos, pool_pts, pool_vals, radius)
                    if avg is not None:
                        break
                    radius *= widen
                if avg is None:
                    dropped.append((r, t0 + 1))
                    continue
                x[loc_idx] = avg
            rows[t0].append(r)
            xs[t0].append(x)
            cs[t0].append(pos)
            radii[t0].append(radius)
    return ImputedCovariates(
        columns=list(ts.columns),
        rows=[np.array(r, dtype=int) for r in rows],
        X=[np.array(x, dtype=float).reshape(-1, K) for x in xs],
        coords=[np.array(c, dtype=float).reshape(-1, 2) for c in cs],
        radius=[np.array(v, dtype=float) for v in radii],
        dropped=dropped,
    )


@dataclass
class OutcomeImputation:
    samples: list[np.ndarray]  # per epoch: (L, n_u)
    lower: list[np.ndarray]
    upper: list[np.ndarray]
    mean: list[np.ndarray]


def impute_outcomes(draws: DrawSet, X_star, V_uu, rng: Rng, level: float = 0.95) -> OutcomeImputation:
    """Posterior-predictive outcomes for the unobserved cells.

    For each draw l and epoch t, y*_{t,u} ~ N(X*_{t,u} beta_t, sigma2 V_{t,uu});
    intervals are the empirical (1-level)/2 and (1+level)/2 quantiles over draws.
    ``V_uu`` may be None for identity covariances.
    """
    L, T, p = draws.beta.shape
    if len(X_star) != T:
        raise DimensionError(f"{len(X_star)} design blocks for {T} epochs")
    q = ((1 - level) / 2, (1 + level) / 2)
    samples, lo, hi, mu = [], [], [], []
    for t in range(T):
        X = np.asarray(X_star[t], dtype=float).reshape(-1, p) if np.size(X_star[t]) else np.zeros((0, p))
        n = X.shape[0]
        V = np.eye(n) if V_uu is None else np.asarray(V_uu[t], dtype=float).reshape(n, n)
        if n == 0:
            ys = np.zeros((L, 0))
        else:
            F = psd_factor(V)
            sd = np.sqrt(draws.sigma2_at(t))
            ys = draws.beta[:, t] @ X.T + sd[:, None] * (rng.normal((L, F.shape[1])) @ F.T)
        samples.append(ys)
        if n and L:
            qs = np.quantile(ys, q, axis=0)
            lo.append(qs[0])
            hi.append(qs[1])
            mu.append(ys.mean(axis=0))
        else:
            lo.append(np.zeros(n))
            hi.append(np.zeros(n))
            mu.append(np.zeros(n))
    return OutcomeImputation(samples, lo, hi, mu)
