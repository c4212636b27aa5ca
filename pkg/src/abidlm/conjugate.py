"""Closed-form conjugate posteriors used as exact references."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla
from scipy.special import ndtri

Z_CLAMP = 8.0


@dataclass
class NormalGammaParams:
    """(beta, 1/sigma2) ~ NG(m, M, a, b): 1/sigma2 ~ Gamma(a, rate=b), beta | sigma2 ~ N(m, sigma2 M)."""

    m: np.ndarray
    M: np.ndarray
    a: float
    b: float

    def __post_init__(self):
        self.m = np.atleast_1d(np.asarray(self.m, dtype=float))
        self.M = np.asarray(self.M, dtype=float).reshape(self.m.shape[0], self.m.shape[0])
        if not (self.a > 0 and self.b > 0):
            raise ValueError(f"shape and rate must be positive, got a={self.a}, b={self.b}")
        np.linalg.cholesky(self.M)


def _prec_solve(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    try:
        return sla.cho_solve(sla.cho_factor(A, lower=True), B)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("matrix is singular or not positive definite") from None


def normal_normal_posterior(X_o, y_o, V_oo, m, M, sigma2: float = 1.0):
    """Posterior of beta under y ~ N(X beta, sigma2 V), beta ~ N(m, sigma2 M).

    Returns ``(m_post, M_post)``; the posterior covariance is
    ``sigma2 * M_post``, so ``sigma2`` itself does not enter.
    """
    m = np.atleast_1d(np.asarray(m, dtype=float))
    p = m.shape[0]
    M = np.asarray(M, dtype=float).reshape(p, p)
    X_o = np.asarray(X_o, dtype=float).reshape(-1, p)
    y_o = np.asarray(y_o, dtype=float).reshape(-1)
    if X_o.shape[0] == 0:
        return m.copy(), M.copy()
    V_oo = np.asarray(V_oo, dtype=float).reshape(X_o.shape[0], X_o.shape[0])
    Vinv_X = _prec_solve(V_oo, X_o)
    Vinv_y = _prec_solve(V_oo, y_o)
    Minv = _prec_solve(M, np.eye(p))
    M_post = _prec_solve(X_o.T @ Vinv_X + Minv, np.eye(p))
    M_post = 0.5 * (M_post + M_post.T)
    m_post = M_post @ (X_o.T @ Vinv_y + Minv @ m)
    return m_post, M_post


def normal_gamma_posterior(X, y, V, m, M, a0: float, b0: float) -> NormalGammaParams:
    """Conjugate update of NG(m, M, a0, b0) with n observations.

    The shape gains n/2 (one half per observation).
    """
    m = np.atleast_1d(np.asarray(m, dtype=float))
    p = m.shape[0]
    M = np.asarray(M, dtype=float).reshape(p, p)
    X = np.asarray(X, dtype=float).reshape(-1, p)
    y = np.asarray(y, dtype=float).reshape(-1)
    n = X.shape[0]
    if n == 0:
        return NormalGammaParams(m.copy(), M.copy(), a0, b0)
    V = np.asarray(V, dtype=float).reshape(n, n)
    m_post, M_post = normal_normal_posterior(X, y, V, m, M)
    quad_y = float(y @ _prec_solve(V, y))
    quad_m = float(m @ _prec_solve(M, m))
    quad_post = float(m_post @ _prec_solve(M_post, m_post))
    b_post = b0 + 0.5 * (quad_y + quad_m - quad_post)
    return NormalGammaParams(m_post, M_post, a0 + 0.5 * n, b_post)


def _gamma_prefactor(a: float, x: float) -> float:
    """x^a e^-x / Gamma(a), in Stirling form for large a to avoid cancellation."""
    if a < 20.0:
        return math.exp(-x + a * math.log(x) - math.lgamma(a))
    t = (x - a) / a
    log_ratio = math.log1p(t) if abs(t) < 0.5 else math.log(x) - math.log(a)
    stirling = 1 / (12 * a) - 1 / (360 * a**3) + 1 / (1260 * a**5) - 1 / (1680 * a**7)
    return math.exp(a * (log_ratio - t) + 0.5 * math.log(a / (2 * math.pi)) - stirling)


def _gamma_p_series(a: float, x: float) -> float:
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(10_000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-16:
            break
    return total * _gamma_prefactor(a, x)


def _gamma_q_contfrac(a: float, x: float) -> float:
    # modified Lentz evaluation of the continued fraction for Q(a, x)
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return _gamma_prefactor(a, x) * h


def regularized_gamma_p(a: float, x: float) -> float:
    """P(a, x), the regularized lower incomplete gamma function.

    Power series for x < a + 1, continued fraction for Q = 1 - P otherwise.
    """
    if a <= 0:
        raise ValueError("shape must be positive")
    if x <= 0:
        return 0.0
    if x < a + 1.0:
        return min(1.0, _gamma_p_series(a, x))
    return max(0.0, 1.0 - _gamma_q_contfrac(a, x))


def regularized_gamma_q(a: float, x: float) -> float:
    if x <= 0:
        return 1.0
    if x < a + 1.0:
        return max(0.0, 1.0 - _gamma_p_series(a, x))
    return min(1.0, _gamma_q_contfrac(a, x))


def gamma_cdf(x: float, shape: float, rate: float) -> float:
    return regularized_gamma_p(shape, rate * x)


def _gamma_to_normal(lam: float, a: float, b: float) -> float:
    """Phi^{-1}(GammaCDF(lam; a, b)), using the upper tail where P is near 1."""
    x = b * lam
    if x < a + 1.0:
        P = regularized_gamma_p(a, x)
        z = float(ndtri(P)) if P > 0 else -np.inf
    else:
        Q = regularized_gamma_q(a, x)
        z = -float(ndtri(Q)) if Q > 0 else np.inf
    if not np.isfinite(z) or abs(z) > Z_CLAMP:
        warnings.warn(f"gamma CDF saturated at precision {lam:.3e}; latent coordinate clamped to +/-{Z_CLAMP}",
                      RuntimeWarning, stacklevel=3)
        z = float(np.clip(np.nan_to_num(z, posinf=Z_CLAMP, neginf=-Z_CLAMP), -Z_CLAMP, Z_CLAMP))
    return z


def exact_ng_transform(beta, sigma2, post: NormalGammaParams) -> np.ndarray:
    """Map (beta, sigma2) to the standard-normal latent that an ideal flow would produce.

    The first p coordinates whiten beta with the Cholesky factor of
    ``sigma2 * M_post``; the last is the normal quantile of the gamma CDF of
    the precision.  Accepts a single draw or a batch (``beta`` of shape
    ``(L, p)`` with ``sigma2`` of shape ``(L,)``).
    """
    beta = np.asarray(beta, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    single = beta.ndim == 1
    beta = np.atleast_2d(beta)
    sigma2 = np.atleast_1d(sigma2)
    if np.any(sigma2 <= 0):
        raise ValueError("sigma2 must be positive")
    Lp = np.linalg.cholesky(post.M)
    zb = sla.solve_triangular(Lp, (beta - post.m).T, lower=True).T / np.sqrt(sigma2)[:, None]
    zs = np.array([_gamma_to_normal(1.0 / s2, post.a, post.b) for s2 in sigma2])
    z = np.column_stack([zb, zs])
    return z[0] if single else z
