"""Dynamic linear model with a shared unknown scale.

    y_t    = X_t beta_t + nu_t,        nu_t    ~ N(0, sigma2 V_t)
    beta_t = G_t beta_{t-1} + omega_t, omega_t ~ N(0, sigma2 W_t)
    beta_0 ~ N(m0, sigma2 M0),         1/sigma2 ~ Gamma(a0, rate=b0)

Exact inference is the forward (Kalman) filter followed by backward sampling.
Epoch indices are 1-based in every user-facing message and file; arrays are
0-based internally.
"""

from __future__ import annotations

import csv
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import linalg as sla
from scipy import stats

from .rng import Rng

SPEC_FORMAT = "abidlm.dlmspec"
SPEC_VERSION = 1


class DlmError(ValueError):
    """Base error; ``epoch`` is the 1-based epoch at fault, when known."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class DimensionError(DlmError):
    pass


class SingularMatrixError(DlmError):
    def __init__(self, message: str, epoch: int | None = None, condition: float | None = None):
        super().__init__(message, epoch)
        self.condition = condition


def _sym(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + A.T)


def _chol(A: np.ndarray, what: str, epoch: int | None) -> np.ndarray:
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        cond = float(np.linalg.cond(A)) if A.size else float("nan")
        where = f" at epoch {epoch}" if epoch is not None else ""
        raise SingularMatrixError(
            f"{what}{where} is not numerically positive definite (condition estimate {cond:.3e})",
            epoch=epoch,
            condition=cond,
        ) from None


def psd_factor(A: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """A square factor F with F F^T = A for symmetric PSD ``A``.

    Cholesky when it succeeds; otherwise a symmetric eigen factor with tiny
    negative eigenvalues (rounding noise) set to zero.
    """
    if A.size == 0:
        return A.copy()
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        w, U = np.linalg.eigh(_sym(A))
        scale = max(float(np.max(np.abs(w))), 1e-300)
        if w.min() < -tol * scale:
            raise SingularMatrixError(
                f"matrix has a negative eigenvalue {w.min():.3e}; not positive semi-definite"
            ) from None
        return U * np.sqrt(np.clip(w, 0.0, None))


@dataclass
class DlmSpec:
    """Complete generative specification of the model.

    ``X``, ``G``, ``V`` and ``W`` are per-epoch lists; ``X[t]`` is ``n_t x p``
    (``n_t`` may be zero).  Dimensions and definiteness are checked on
    construction.
    """

    X: list[np.ndarray]
    G: list[np.ndarray]
    V: list[np.ndarray]
    W: list[np.ndarray]
    m0: np.ndarray
    M0: np.ndarray
    a0: float
    b0: float

    def __post_init__(self):
        self.m0 = np.atleast_1d(np.asarray(self.m0, dtype=float))
        p = self.m0.shape[0]
        self.M0 = np.asarray(self.M0, dtype=float).reshape(p, p)
        T = len(self.X)
        if T == 0:
            raise DimensionError("a DLM needs at least one epoch")
        for name in ("G", "V", "W"):
            if len(getattr(self, name)) != T:
                raise DimensionError(f"{name} has {len(getattr(self, name))} epochs, X has {T}")
        self.X = [np.asarray(x, dtype=float).reshape(-1, p) for x in self.X]
        self.G = [np.asarray(g, dtype=float) for g in self.G]
        self.W = [np.asarray(w, dtype=float) for w in self.W]
        self.V = [np.asarray(v, dtype=float).reshape(x.shape[0], x.shape[0]) for v, x in zip(self.V, self.X)]
        self.a0 = float(self.a0)
        self.b0 = float(self.b0)
        if not (self.a0 > 0 and self.b0 > 0):
            raise DlmError(f"a0 and b0 must be positive, got a0={self.a0}, b0={self.b0}")
        _chol(self.M0, "M0", None)
        for t in range(T):
            e = t + 1
            if self.G[t].shape != (p, p):
                raise DimensionError(f"G at epoch {e} has shape {self.G[t].shape}, expected {(p, p)}", e)
            if self.W[t].shape != (p, p):
                raise DimensionError(f"W at epoch {e} has shape {self.W[t].shape}, expected {(p, p)}", e)
            if np.max(np.abs(self.W[t] - self.W[t].T), initial=0.0) > 1e-10 * max(1.0, np.abs(self.W[t]).max()):
                raise DlmError(f"W at epoch {e} is not symmetric", e)
            try:
                psd_factor(self.W[t])
            except SingularMatrixError:
                raise DlmError(f"W at epoch {e} is not positive semi-definite", e) from None
            if self.X[t].shape[0] > 0:
                _chol(self.V[t], "V", e)

    @property
    def T(self) -> int:
        return len(self.X)

    @property
    def p(self) -> int:
        return self.m0.shape[0]

    @property
    def n(self) -> list[int]:
        return [x.shape[0] for x in self.X]

    @classmethod
    def standard(cls, X: Sequence[np.ndarray], a0: float = 3.0, b0: float = 1.0, **overrides) -> "DlmSpec":
        """Identity G, W, V, M0 and zero m0 around the given designs."""
        X = [np.atleast_2d(np.asarray(x, dtype=float)) for x in X]
        p = next(x.shape[1] for x in X if x.size) if any(x.size for x in X) else overrides["m0"].shape[0]
        X = [x.reshape(-1, p) for x in X]
        T = len(X)
        kw = dict(
            G=[np.eye(p) for _ in range(T)],
            W=[np.eye(p) for _ in range(T)],
            V=[np.eye(x.shape[0]) for x in X],
            m0=np.zeros(p),
            M0=np.eye(p),
        )
        kw.update(overrides)
        return cls(X=X, a0=a0, b0=b0, **kw)

    def restrict(self, start: int, end: int, M0: np.ndarray | None = None, m0: np.ndarray | None = None) -> "DlmSpec":
        """Sub-model over 1-based epochs ``start..end`` inclusive."""
        sl = slice(start - 1, end)
        return DlmSpec(
            X=self.X[sl], G=self.G[sl], V=self.V[sl], W=self.W[sl],
            m0=self.m0 if m0 is None else m0,
            M0=self.M0 if M0 is None else M0,
            a0=self.a0, b0=self.b0,
        )

    def to_dict(self) -> dict:
        return {
            "format": SPEC_FORMAT,
            "version": SPEC_VERSION,
            "T": self.T,
            "p": self.p,
            "n": self.n,
            "a0": self.a0,
            "b0": self.b0,
            "m0": self.m0.tolist(),
            "M0": self.M0.tolist(),
            "X": [x.tolist() for x in self.X],
            "G": [g.tolist() for g in self.G],
            "V": [v.tolist() for v in self.V],
            "W": [w.tolist() for w in self.W],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DlmSpec":
        if d.get("format") != SPEC_FORMAT:
            raise DlmError(f"not a DLM spec document (format={d.get('format')!r})")
        if d.get("version") != SPEC_VERSION:
            raise DlmError(f"unsupported spec version {d.get('version')}")
        p = int(d["p"])
        spec = cls(
            X=[np.asarray(x, dtype=float).reshape(-1, p) for x in d["X"]],
            G=d["G"], V=d["V"], W=d["W"],
            m0=d["m0"], M0=d["M0"], a0=d["a0"], b0=d["b0"],
        )
        if spec.T != d["T"] or spec.n != list(d["n"]):
            raise DimensionError("declared T/n disagree with the stored matrices")
        return spec

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DlmSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class FilterState:
    """Per-epoch filter output; row t of each array is epoch t+1."""

    a: np.ndarray  # (T,)
    b: np.ndarray  # (T,)
    c: np.ndarray  # (T, p)
    C: np.ndarray  # (T, p, p)
    m: np.ndarray  # (T, p)
    M: np.ndarray  # (T, p, p)
    q: list[np.ndarray] = field(default_factory=list)
    Q: list[np.ndarray] = field(default_factory=list)

    @property
    def T(self) -> int:
        return self.a.shape[0]

    @property
    def aT(self) -> float:
        return float(self.a[-1])

    @property
    def bT(self) -> float:
        return float(self.b[-1])


def save_npz(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """``np.savez`` layout with fixed zip timestamps so equal arrays give equal bytes."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(info, buf.getvalue())


@dataclass
class PosteriorDraw:
    beta: np.ndarray  # (T, p)
    sigma2: float


@dataclass
class DrawSet:
    """L joint posterior draws held as arrays.

    ``sigma2_epoch`` is set when the scale differs per epoch (blocked
    amortized draws); otherwise every epoch shares ``sigma2``.
    """

    beta: np.ndarray  # (L, T, p)
    sigma2: np.ndarray  # (L,)
    sigma2_epoch: np.ndarray | None = None  # (L, T)

    def __len__(self) -> int:
        return self.beta.shape[0]

    def __getitem__(self, i: int) -> PosteriorDraw:
        return PosteriorDraw(beta=self.beta[i], sigma2=float(self.sigma2[i]))

    def __iter__(self) -> Iterator[PosteriorDraw]:
        return (self[i] for i in range(len(self)))

    def sigma2_at(self, t: int) -> np.ndarray:
        """Scale draws for 0-based epoch ``t``."""
        if self.sigma2_epoch is not None:
            return self.sigma2_epoch[:, t]
        return self.sigma2

    def save(self, path: str | Path) -> None:
        arrays = {"beta": self.beta, "sigma2": self.sigma2}
        if self.sigma2_epoch is not None:
            arrays["sigma2_epoch"] = self.sigma2_epoch
        save_npz(path, arrays)

    @classmethod
    def load(cls, path: str | Path) -> "DrawSet":
        with np.load(path) as z:
            return cls(
                beta=z["beta"], sigma2=z["sigma2"],
                sigma2_epoch=z["sigma2_epoch"] if "sigma2_epoch" in z.files else None,
            )


@dataclass
class SmoothingMarginal:
    s: np.ndarray  # (T, p)
    S: np.ndarray  # (T, p, p)
    aT: float
    bT: float

    def intervals(self, level: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
        """Equal-tailed Student-t credible bounds, each ``(T, p)``."""
        return student_t_intervals(self.s, self.S, self.aT, self.bT, level)


def student_t_intervals(mean, scale_mats, a, b, level=0.95):
    """Marginal bounds of T_{2a}(mean, (b/a) S) per coordinate.

    ``a`` and ``b`` may be scalars or per-epoch arrays.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    q = stats.t.ppf(0.5 + level / 2.0, df=2.0 * a)
    diag = np.diagonal(scale_mats, axis1=-2, axis2=-1)
    ratio = (b / a)
    if ratio.ndim:
        ratio = ratio[:, None]
        q = q[:, None]
    half = q * np.sqrt(ratio * diag)
    return mean - half, mean + half


def _check_y(spec: DlmSpec, y) -> list[np.ndarray]:
    if len(y) != spec.T:
        raise DimensionError(f"got {len(y)} observation epochs, spec has T={spec.T}")
    out = []
    for t, (yt, nt) in enumerate(zip(y, spec.n)):
        yt = np.asarray(yt, dtype=float).reshape(-1)
        if yt.shape[0] != nt:
            raise DimensionError(f"epoch {t + 1}: {yt.shape[0]} observations, spec expects n_t={nt}", t + 1)
        if not np.all(np.isfinite(yt)):
            raise DlmError(f"epoch {t + 1}: non-finite observation", t + 1)
        out.append(yt)
    return out


def forward_filter(spec: DlmSpec, y) -> FilterState:
    """Kalman filter for the normal-gamma DLM.

    Epochs with no observations only propagate the state.
    """
    y = _check_y(spec, y)
    T, p = spec.T, spec.p
    a_arr = np.empty(T)
    b_arr = np.empty(T)
    c_arr = np.empty((T, p))
    C_arr = np.empty((T, p, p))
    m_arr = np.empty((T, p))
    M_arr = np.empty((T, p, p))
    qs, Qs = [], []
    m, M, a, b = spec.m0, spec.M0, spec.a0, spec.b0
    for t in range(T):
        G, X = spec.G[t], spec.X[t]
        c = G @ m
        C = _sym(G @ M @ G.T + spec.W[t])
        if X.shape[0] == 0:
            q = np.zeros(0)
            Q = np.zeros((0, 0))
            m, M = c, C
        else:
            q = X @ c
            Q = _sym(X @ C @ X.T + spec.V[t])
            L = _chol(Q, "one-step forecast covariance Q", t + 1)
            XC = X @ C
            QinvXC = sla.cho_solve((L, True), XC)
            e = y[t] - q
            m = c + QinvXC.T @ e
            M = _sym(C - XC.T @ QinvXC)
            w = sla.solve_triangular(L, e, lower=True)
            a = a + 0.5 * X.shape[0]
            b = b + 0.5 * float(w @ w)
        a_arr[t], b_arr[t] = a, b
        c_arr[t], C_arr[t], m_arr[t], M_arr[t] = c, C, m, M
        qs.append(q)
        Qs.append(Q)
    return FilterState(a=a_arr, b=b_arr, c=c_arr, C=C_arr, m=m_arr, M=M_arr, q=qs, Q=Qs)


def _smoother_gains(fs: FilterState, spec: DlmSpec) -> list[np.ndarray | None]:
    """J_t = M_t G_{t+1}^T C_{t+1}^{-1} for t < T; None at the last epoch."""
    gains: list[np.ndarray | None] = [None] * fs.T
    for t in range(fs.T - 1):
        Cn = fs.C[t + 1]
        L = _chol(Cn, "prior covariance C", t + 2)
        gains[t] = sla.cho_solve((L, True), spec.G[t + 1] @ fs.M[t]).T
    return gains


def smoothing_marginal(fs: FilterState, spec: DlmSpec) -> SmoothingMarginal:
    """Marginal smoothing moments s_t, S_t without sampling."""
    T = fs.T
    s = np.empty_like(fs.m)
    S = np.empty_like(fs.M)
    s[-1], S[-1] = fs.m[-1], fs.M[-1]
    gains = _smoother_gains(fs, spec)
    for t in range(T - 2, -1, -1):
        J = gains[t]
        s[t] = fs.m[t] + J @ (s[t + 1] - fs.c[t + 1])
        S[t] = _sym(fs.M[t] - J @ (fs.C[t + 1] - S[t + 1]) @ J.T)
    return SmoothingMarginal(s=s, S=S, aT=fs.aT, bT=fs.bT)


class _BackwardPlan:
    """Draw-independent quantities of the backward sampler."""

    def __init__(self, fs: FilterState, spec: DlmSpec, joint: bool):
        self.fs = fs
        self.joint = joint
        T = fs.T
        self.gains = _smoother_gains(fs, spec)
        self.factors: list[np.ndarray] = [None] * T  # type: ignore[list-item]
        self.factors[-1] = psd_factor(fs.M[-1])
        if joint:
            for t in range(T - 1):
                J = self.gains[t]
                H = _sym(fs.M[t] - J @ spec.G[t + 1] @ fs.M[t])
                self.factors[t] = psd_factor(H)
        else:
            self.marg = smoothing_marginal(fs, spec)
            for t in range(T - 1):
                self.factors[t] = psd_factor(self.marg.S[t])

    def draw(self, rng: Rng, L: int) -> DrawSet:
        fs = self.fs
        T, p = fs.m.shape
        lam = np.atleast_1d(rng.gamma(fs.aT, fs.bT, size=L))
        sd = 1.0 / np.sqrt(lam)
        z = rng.normal((L, T, p))
        beta = np.empty((L, T, p))
        beta[:, -1] = fs.m[-1] + sd[:, None] * (z[:, -1] @ self.factors[-1].T)
        for t in range(T - 2, -1, -1):
            noise = sd[:, None] * (z[:, t] @ self.factors[t].T)
            if self.joint:
                mean = fs.m[t] + (beta[:, t + 1] - fs.c[t + 1]) @ self.gains[t].T
            else:
                mean = self.marg.s[t]
            beta[:, t] = mean + noise
        return DrawSet(beta=beta, sigma2=1.0 / lam)


def backward_sample(fs: FilterState, spec: DlmSpec, rng: Rng, joint: bool = True) -> PosteriorDraw:
    """One draw of (beta_{1:T}, sigma2) given the filter output.

    With ``joint=True`` beta_t is drawn from its conditional given
    beta_{t+1}, so the path is a draw from the joint smoothing posterior.
    ``joint=False`` draws each beta_t from N(s_t, sigma2 S_t) given the
    common sigma2: correct marginals, but no dependence across epochs.
    """
    return _BackwardPlan(fs, spec, joint).draw(rng, 1)[0]


def ffbs(spec: DlmSpec, y, rng: Rng, L: int, joint: bool = True) -> DrawSet:
    """Forward filter once, then L independent backward draws."""
    if L < 0:
        raise ValueError("L must be non-negative")
    fs = forward_filter(spec, y)
    if L == 0:
        return DrawSet(beta=np.zeros((0, spec.T, spec.p)), sigma2=np.zeros(0))
    return _BackwardPlan(fs, spec, joint).draw(rng, L)


def dlm_prior_draw(spec: DlmSpec, rng: Rng, size: int | None = None, M0: np.ndarray | None = None,
                   m0: np.ndarray | None = None):
    """Draw (beta_{1:T}, sigma2) from the prior.

    Returns ``(beta (T, p), sigma2)`` or, with ``size``, ``(beta (size, T, p),
    sigma2 (size,))``.  ``m0``/``M0`` override the spec's initial state prior.
    """
    m0 = spec.m0 if m0 is None else np.asarray(m0, dtype=float)
    M0 = spec.M0 if M0 is None else np.asarray(M0, dtype=float)
    L = 1 if size is None else size
    lam = np.atleast_1d(rng.gamma(spec.a0, spec.b0, size=L))
    sd = 1.0 / np.sqrt(lam)
    z = rng.normal((L, spec.T + 1, spec.p))
    prev = m0 + sd[:, None] * (z[:, 0] @ _chol(M0, "M0", None).T)
    beta = np.empty((L, spec.T, spec.p))
    for t in range(spec.T):
        prev = prev @ spec.G[t].T + sd[:, None] * (z[:, t + 1] @ psd_factor(spec.W[t]).T)
        beta[:, t] = prev
    if size is None:
        return beta[0], float(1.0 / lam[0])
    return beta, 1.0 / lam


def y_from_dlm_batch(beta: np.ndarray, sigma2: np.ndarray, X, V, rng: Rng) -> list[np.ndarray]:
    """One outcome path per parameter draw.

    ``beta`` is ``(B, T, p)`` and ``sigma2`` is ``(B,)`` or ``(B, T)``;
    returns a per-epoch list of ``(B, n_t)`` arrays.
    """
    B, T, _ = beta.shape
    sigma2 = np.asarray(sigma2, dtype=float)
    out = []
    for t in range(T):
        Xt = np.asarray(X[t], dtype=float)
        nt = Xt.shape[0]
        if nt == 0:
            out.append(np.zeros((B, 0)))
            continue
        F = _chol(np.asarray(V[t], dtype=float), "V", t + 1)
        sd = np.sqrt(sigma2 if sigma2.ndim == 1 else sigma2[:, t])
        out.append(beta[:, t] @ Xt.T + sd[:, None] * (rng.normal((B, nt)) @ F.T))
    return out


def y_from_dlm(beta: np.ndarray, sigma2: float, X, V, L: int, rng: Rng) -> list[list[np.ndarray]]:
    """L independent outcome paths for fixed (beta_{1:T}, sigma2)."""
    beta = np.asarray(beta, dtype=float)
    reps = np.broadcast_to(beta, (L,) + beta.shape)
    per_epoch = y_from_dlm_batch(reps, np.full(L, float(sigma2)), X, V, rng)
    return [[per_epoch[t][l] for t in range(len(per_epoch))] for l in range(L)]


def write_observations(path: str | Path, y: Sequence[np.ndarray]) -> None:
    """CSV with columns ``epoch,row_index,value`` (both indices 1-based)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "row_index", "value"])
        for t, yt in enumerate(y):
            for i, v in enumerate(np.asarray(yt).reshape(-1)):
                w.writerow([t + 1, i + 1, repr(float(v))])


def read_observations(path: str | Path, spec: DlmSpec) -> list[np.ndarray]:
    y = [np.full(n, np.nan) for n in spec.n]
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            t, i = int(rec["epoch"]), int(rec["row_index"])
            if not (1 <= t <= spec.T) or not (1 <= i <= spec.n[t - 1]):
                raise DimensionError(f"observation (epoch={t}, row_index={i}) outside the spec's dimensions", t)
            y[t - 1][i - 1] = float(rec["value"])
    for t, yt in enumerate(y):
        if np.isnan(yt).any():
            raise DimensionError(f"epoch {t + 1}: missing observations in {path}", t + 1)
    return y
