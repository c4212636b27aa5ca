"""Glue between a timesheet and the DLM: observed designs, imputation runs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dlm import DlmSpec, dlm_prior_draw, ffbs, y_from_dlm_batch
from ..rng import Rng
from .impute import ImputedCovariates, OutcomeImputation, impute_covariates, impute_outcomes
from .sheet import Timesheet, scale_covariates
from .synthetic import imputed_fraction


def observed_spec(ts: Timesheet, a0: float = 3.0, b0: float = 1.0, intercept: bool = True) -> tuple[DlmSpec, list[np.ndarray]]:
    """DLM over the observed cells with identity G, W, V, M0 and the timesheet's designs."""
    p = len(ts.columns) + int(intercept)
    X = [ts.design(t, intercept=intercept).reshape(-1, p) for t in range(1, ts.T + 1)]
    y = [ts.outcomes(t) for t in range(1, ts.T + 1)]
    spec = DlmSpec.standard(X, a0=a0, b0=b0, m0=np.zeros(p))
    return spec, y


def imputed_designs(ts: Timesheet, imp: ImputedCovariates, intercept: bool = True) -> list[np.ndarray]:
    return [imp.design(t, ts.scaler, intercept) for t in range(1, ts.T + 1)]


@dataclass
class CoverageRun:
    coverage: float
    n_cells: int
    imputed_fraction: float
    imputation: OutcomeImputation
    truth: list[np.ndarray]


def imputation_coverage(ts: Timesheet, rng: Rng, L: int = 2000, r_s: float = 200.0, level: float = 0.95,
                        a0: float = 3.0, b0: float = 1.0) -> CoverageRun:
    """Synthetic check of the imputation procedure on a timesheet's layout.

    Ground truth (beta, sigma2) comes from one prior draw; observed and
    unobserved outcomes are simulated from the DLM with the observed designs
    and the imputed designs respectively.  FFBS on the observed part then
    drives posterior-predictive imputation of the unobserved cells.
    """
    if ts.scaler is None:
        ts, _ = scale_covariates(ts)
    imp = impute_covariates(ts, r_s=r_s)
    spec, _ = observed_spec(ts, a0, b0)
    X_u = imputed_designs(ts, imp)
    truth_rng, fit_rng, imp_rng = rng.spawn(3)
    beta, sigma2 = dlm_prior_draw(spec, truth_rng, size=1)
    y_o = [yt[0] for yt in y_from_dlm_batch(beta, sigma2, spec.X, spec.V, truth_rng)]
    y_u = [yt[0] for yt in y_from_dlm_batch(beta, sigma2, X_u, [np.eye(x.shape[0]) for x in X_u], truth_rng)]
    draws = ffbs(spec, y_o, fit_rng, L)
    out = impute_outcomes(draws, X_u, None, imp_rng, level)
    hits = sum(int(np.sum((lo <= y) & (y <= hi))) for lo, hi, y in zip(out.lower, out.upper, y_u))
    n = sum(y.shape[0] for y in y_u)
    return CoverageRun(hits / max(n, 1), n, imputed_fraction(ts), out, y_u)
