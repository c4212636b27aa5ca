"""Simulation-based training of the coupling flow and amortized sampling.

The flow always works on (beta..., log sigma2): the precision drawn by the
simulators is mapped through this fixed bijection before training pairs are
formed, and mapped back when sampling.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import linalg as sla

from .conjugate import NormalGammaParams, normal_gamma_posterior
from .dlm import DlmError, DlmSpec, DrawSet, _chol, _sym, dlm_prior_draw, y_from_dlm_batch
from .flow import FlowError, FlowNetwork, GradientSet, flow_forward, flow_inverse, loss_and_grad
from .rng import Rng

REPARAM = "log_sigma2"


class TrainingError(RuntimeError):
    """Training hit a non-finite loss; ``last_net`` holds the last finite state."""

    def __init__(self, message: str, iteration: int, last_net: FlowNetwork):
        super().__init__(message)
        self.iteration = iteration
        self.last_net = last_net


@dataclass
class TrainConfig:
    batch_size: int = 32
    n_iter: int = 5000
    alpha: float = 1e-3
    delta1: float = 0.9
    delta2: float = 0.999
    epsilon: float = 1e-8
    max_grad_norm: float = 1.0
    decay_schedule: str = "cosine"
    seed: int = 0
    hidden: int = 128

    def __post_init__(self):
        if not (0 <= self.delta1 < 1 and 0 <= self.delta2 < 1):
            raise ValueError("decay rates must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.max_grad_norm <= 0:
            raise ValueError("max_grad_norm must be positive")
        if self.decay_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown decay schedule {self.decay_schedule!r}")
        if self.n_iter < 0:
            raise ValueError("n_iter must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        aliases = {"M": "batch_size", "N_ITER": "n_iter"}
        known = {}
        for k, v in d.items():
            k = aliases.get(k, k)
            if k in cls.__dataclass_fields__:
                known[k] = v
        return cls(**known)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BlockPlan:
    """Contiguous epoch blocks ``(start, end)``, 1-based and inclusive."""

    blocks: list[tuple[int, int]]
    depths: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.blocks = [(int(s), int(e)) for s, e in self.blocks]
        if not self.blocks:
            raise ValueError("a plan needs at least one block")
        expected = 1
        for s, e in self.blocks:
            if s != expected or e < s:
                raise ValueError(f"blocks must tile the epochs without gaps; block ({s}, {e}) should start at {expected}")
            expected = e + 1
        if not self.depths:
            self.depths = [4 if s == e else 6 for s, e in self.blocks]
        if len(self.depths) != len(self.blocks):
            raise ValueError("one depth per block is required")
        if any(d < 2 or d % 2 for d in self.depths):
            raise ValueError("flow depths must be even and at least 2")

    @property
    def T(self) -> int:
        return self.blocks[-1][1]

    @classmethod
    def single(cls, T: int, depth: int | None = None) -> "BlockPlan":
        return cls([(1, T)], [depth] if depth else [])

    @classmethod
    def from_sizes(cls, sizes: Sequence[int], depths: Sequence[int] | None = None) -> "BlockPlan":
        blocks, start = [], 1
        for size in sizes:
            blocks.append((start, start + size - 1))
            start += size
        return cls(blocks, list(depths or []))

    def to_dict(self) -> dict:
        return {"blocks": [list(b) for b in self.blocks], "depths": list(self.depths)}

    @classmethod
    def from_dict(cls, d: dict) -> "BlockPlan":
        if "sizes" in d:
            return cls.from_sizes(d["sizes"], d.get("depths"))
        return cls([tuple(b) for b in d["blocks"]], list(d.get("depths", [])))


@dataclass
class BridgeMoments:
    mean: np.ndarray
    cov: np.ndarray


@dataclass
class TrainResult:
    net: FlowNetwork
    trace: list[tuple[int, float, float, float]]  # (iteration, loss, grad_norm, lr)

    @property
    def losses(self) -> np.ndarray:
        return np.array([row[1] for row in self.trace])


def cosine_decay(j: float, n_iter: int) -> float:
    """Half-cosine step-size factor: 1 at j=0, 0 at j=n_iter."""
    if n_iter <= 0:
        return 1.0
    j = min(max(j, 0), n_iter)
    return 0.5 * (1.0 + math.cos(math.pi * j / n_iter))


def clip_gradient(grad: GradientSet, max_norm: float) -> GradientSet:
    norm = grad.norm()
    if norm > max_norm:
        return grad.scaled(max_norm / norm)
    return grad


class Adam:
    """ADAM moments for a fixed list of parameter arrays, updated in place."""

    def __init__(self, params: list[np.ndarray], delta1=0.9, delta2=0.999, epsilon=1e-8):
        self.params = params
        self.delta1, self.delta2, self.epsilon = delta1, delta2, epsilon
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.j = 0

    def step(self, grad: GradientSet, lr: float) -> None:
        self.j += 1
        c1 = 1.0 - self.delta1 ** self.j
        c2 = 1.0 - self.delta2 ** self.j
        for p, g, m, v in zip(self.params, grad.arrays, self.m, self.v):
            m *= self.delta1
            m += (1.0 - self.delta1) * g
            v *= self.delta2
            v += (1.0 - self.delta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.epsilon)


PriorSim = Callable[[Rng, int], np.ndarray]
DataSim = Callable[[np.ndarray, Rng], np.ndarray]


def adam_train(net: FlowNetwork, prior_sim: PriorSim, data_sim: DataSim, cfg: TrainConfig,
               rng: Rng | None = None, progress: Callable[[int, float, FlowNetwork], None] | None = None) -> TrainResult:
    """Online training: every iteration simulates a fresh batch.

    ``prior_sim(rng, M)`` returns an ``(M, d)`` batch in flow coordinates and
    ``data_sim(theta, rng)`` the matching ``(M, c)`` condition batch.  The
    input network is left untouched; ``progress(j, loss, net)`` is called
    after every update (checkpointing hooks in here).
    """
    rng = rng or Rng(cfg.seed)
    net = net.copy()
    opt = Adam(net.params(), cfg.delta1, cfg.delta2, cfg.epsilon)
    trace = []
    for j in range(1, cfg.n_iter + 1):
        theta = prior_sim(rng, cfg.batch_size)
        cond = data_sim(theta, rng)
        try:
            value, grad = loss_and_grad(net, theta, cond)
        except FlowError as err:
            raise TrainingError(f"iteration {j}: {err}", j, net.copy()) from err
        gnorm = grad.norm()
        if not math.isfinite(gnorm):
            raise TrainingError(f"iteration {j}: non-finite gradient", j, net.copy())
        factor = cosine_decay(j - 1, cfg.n_iter) if cfg.decay_schedule == "cosine" else 1.0
        lr = cfg.alpha * factor
        opt.step(clip_gradient(grad, cfg.max_grad_norm), lr)
        trace.append((j, value, gnorm, lr))
        if progress is not None:
            progress(j, value, net)
    return TrainResult(net, trace)


def write_trace(path: str | Path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss", "grad_norm", "lr"])
        for j, value, gnorm, lr in trace:
            w.writerow([j, repr(float(value)), repr(float(gnorm)), repr(float(lr))])


def to_flow_coords(beta_flat: np.ndarray, sigma2: np.ndarray) -> np.ndarray:
    return np.column_stack([beta_flat, np.log(sigma2)])


def from_flow_coords(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return theta[:, :-1], np.exp(theta[:, -1])


def sample_posterior(net: FlowNetwork, y_obs, L: int, rng: Rng) -> np.ndarray:
    """L amortized posterior draws for one observed condition vector.

    Returns an ``(L, d)`` array in natural coordinates: for networks trained
    on (beta, log sigma2) the last column is sigma2 itself.
    """
    cond = np.asarray(y_obs, dtype=float).reshape(1, -1)
    z = rng.normal((L, net.theta_dim))
    theta = flow_inverse(z, np.broadcast_to(cond, (L, cond.shape[1])), net)
    if net.meta.get("reparam", REPARAM) == REPARAM:
        theta = theta.copy()
        theta[:, -1] = np.exp(theta[:, -1])
    return theta


def latent_moments(net: FlowNetwork, theta_flow: np.ndarray, cond: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate mean and variance of the pushed-forward latent."""
    z, _ = flow_forward(theta_flow, cond, net)
    return z.mean(axis=0), z.var(axis=0, ddof=1)


def bridge_prior_moments(spec: DlmSpec, t: int) -> BridgeMoments:
    """Prior-predictive mean and covariance of beta_t, closed form.

    Runs the data-free covariance part of the filter to epoch ``t`` and
    accumulates the propagated gain terms C_r X_r^T Q_r^{-1} X_r C_r.
    ``t = 0`` gives the initial state prior.
    """
    if spec.a0 <= 1:
        raise DlmError(f"prior variance is undefined for a0={spec.a0} <= 1")
    if not 0 <= t <= spec.T:
        raise DlmError(f"epoch {t} outside 0..{spec.T}")
    p = spec.p
    M = spec.M0
    mean = spec.m0.copy()
    acc = np.zeros((p, p))
    for r in range(t):
        G, X = spec.G[r], spec.X[r]
        mean = G @ mean
        C = _sym(G @ M @ G.T + spec.W[r])
        acc = G @ acc @ G.T
        if X.shape[0]:
            Q = _sym(X @ C @ X.T + spec.V[r])
            L = _chol(Q, "Q", r + 1)
            XC = X @ C
            K = _sym(XC.T @ sla.cho_solve((L, True), XC))
            M = _sym(C - K)
            acc = acc + K
        else:
            M = C
    scale = spec.b0 / (spec.a0 - 1.0)
    return BridgeMoments(mean=mean, cov=_sym(scale * (M + acc)))


class NormalGammaProblem:
    """Static regression y ~ N(X beta, sigma2 V) with a normal-gamma prior."""

    def __init__(self, X, V=None, m0=None, M0=None, a0: float = 3.0, b0: float = 1.0):
        self.X = np.asarray(X, dtype=float)
        n, p = self.X.shape
        self.V = np.eye(n) if V is None else np.asarray(V, dtype=float)
        self.m0 = np.zeros(p) if m0 is None else np.asarray(m0, dtype=float)
        self.M0 = np.eye(p) if M0 is None else np.asarray(M0, dtype=float)
        self.a0, self.b0 = float(a0), float(b0)
        self._LM = np.linalg.cholesky(self.M0)
        self._LV = np.linalg.cholesky(self.V)

    @property
    def theta_dim(self) -> int:
        return self.X.shape[1] + 1

    @property
    def cond_dim(self) -> int:
        return self.X.shape[0]

    def draw_prior(self, rng: Rng, M: int) -> tuple[np.ndarray, np.ndarray]:
        lam = np.atleast_1d(rng.gamma(self.a0, self.b0, size=M))
        beta = self.m0 + (rng.normal((M, self.X.shape[1])) @ self._LM.T) / np.sqrt(lam)[:, None]
        return beta, 1.0 / lam

    def prior_sim(self, rng: Rng, M: int) -> np.ndarray:
        return to_flow_coords(*self.draw_prior(rng, M))

    def data_sim(self, theta: np.ndarray, rng: Rng) -> np.ndarray:
        beta, sigma2 = from_flow_coords(theta)
        noise = rng.normal((theta.shape[0], self.X.shape[0])) @ self._LV.T
        return beta @ self.X.T + np.sqrt(sigma2)[:, None] * noise

    def posterior(self, y) -> NormalGammaParams:
        return normal_gamma_posterior(self.X, y, self.V, self.m0, self.M0, self.a0, self.b0)

    def new_network(self, depth: int = 4, hidden: int = 128, rng: Rng | None = None) -> FlowNetwork:
        net = FlowNetwork.create(self.theta_dim, self.cond_dim, depth, hidden, rng)
        net.meta.update({"reparam": REPARAM, "problem": "normal_gamma", "p": self.X.shape[1]})
        return net


class DlmBlockProblem:
    """Training problem for one epoch block of a DLM.

    The flow parameter is (beta_start..beta_end flattened, log sigma2_b); the
    condition is the concatenation of y_t over the block in epoch order.
    ``prior="inflate"`` inflates the initial covariance to M0 + (start-1) I;
    ``prior="bridge"`` uses the closed-form prior-predictive moments of
    beta_{start-1} instead.
    """

    def __init__(self, spec: DlmSpec, start: int, end: int, prior: str = "inflate"):
        if not 1 <= start <= end <= spec.T:
            raise DlmError(f"block ({start}, {end}) outside 1..{spec.T}")
        self.spec, self.start, self.end, self.prior = spec, start, end, prior
        if prior == "inflate":
            self.m0 = spec.m0
            self.M0 = spec.M0 + (start - 1) * np.eye(spec.p)
        elif prior == "bridge":
            bm = bridge_prior_moments(spec, start - 1)
            self.m0 = bm.mean
            self.M0 = bm.cov * (spec.a0 - 1.0) / spec.b0
        else:
            raise ValueError(f"unknown block prior {prior!r}")
        self.sub = spec.restrict(start, end, M0=self.M0, m0=self.m0)

    @property
    def n_epochs(self) -> int:
        return self.end - self.start + 1

    @property
    def theta_dim(self) -> int:
        return self.n_epochs * self.spec.p + 1

    @property
    def cond_dim(self) -> int:
        return sum(self.sub.n)

    def prior_sim(self, rng: Rng, M: int) -> np.ndarray:
        beta, sigma2 = dlm_prior_draw(self.sub, rng, size=M)
        return to_flow_coords(beta.reshape(M, -1), sigma2)

    def data_sim(self, theta: np.ndarray, rng: Rng) -> np.ndarray:
        beta_flat, sigma2 = from_flow_coords(theta)
        beta = beta_flat.reshape(theta.shape[0], self.n_epochs, self.spec.p)
        ys = y_from_dlm_batch(beta, sigma2, self.sub.X, self.sub.V, rng)
        return np.concatenate(ys, axis=1)

    def condition(self, y) -> np.ndarray:
        """Condition vector from a full-horizon observation sequence."""
        parts = [np.asarray(y[t], dtype=float).reshape(-1) for t in range(self.start - 1, self.end)]
        return np.concatenate(parts) if parts else np.zeros(0)

    def new_network(self, depth: int, hidden: int, rng: Rng) -> FlowNetwork:
        net = FlowNetwork.create(self.theta_dim, self.cond_dim, depth, hidden, rng)
        net.meta.update({
            "reparam": REPARAM, "problem": "dlm_block", "block": [self.start, self.end],
            "p": self.spec.p, "n": self.sub.n, "prior": self.prior,
        })
        return net


def train_blocked(spec: DlmSpec, plan: BlockPlan, cfg: TrainConfig, prior: str = "inflate",
                  threads: int = 1, skip: Callable[[int], FlowNetwork | None] | None = None,
                  on_done: Callable[[int, TrainResult], None] | None = None,
                  on_progress: Callable[[int, int, float, FlowNetwork], None] | None = None) -> list[TrainResult]:
    """Train one fresh flow per block.

    Blocks get independent random streams spawned from ``cfg.seed``, so the
    result does not depend on ``threads``.  ``skip(b)`` may return an already
    trained network for block b (resumption); ``on_progress(b, j, loss, net)``
    is forwarded from every training iteration.
    """
    if plan.T != spec.T:
        raise ValueError(f"plan covers {plan.T} epochs, spec has {spec.T}")
    streams = Rng(cfg.seed).spawn(len(plan.blocks))

    def run(b: int) -> TrainResult:
        existing = skip(b) if skip else None
        if existing is not None:
            return TrainResult(existing, [])
        start, end = plan.blocks[b]
        problem = DlmBlockProblem(spec, start, end, prior)
        init_rng, sim_rng = streams[b].spawn(2)
        net = problem.new_network(plan.depths[b], cfg.hidden, init_rng)
        hook = (lambda j, value, cur: on_progress(b, j, value, cur)) if on_progress else None
        result = adam_train(net, problem.prior_sim, problem.data_sim, cfg, sim_rng, progress=hook)
        if on_done:
            on_done(b, result)
        return result

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(run, range(len(plan.blocks))))
    return [run(b) for b in range(len(plan.blocks))]


def sample_blocked(nets: Sequence[FlowNetwork], spec: DlmSpec, y, L: int, rng: Rng) -> DrawSet:
    """Amortized draws over the full horizon from per-block networks.

    Every block carries its own scale, so ``sigma2_epoch`` is filled; the
    ``sigma2`` field holds the first block's scale.
    """
    p = spec.p
    beta = np.empty((L, spec.T, p))
    sig = np.empty((L, spec.T))
    streams = rng.spawn(len(nets))
    for net, stream in zip(nets, streams):
        start, end = net.meta["block"]
        problem = DlmBlockProblem(spec, start, end, net.meta.get("prior", "inflate"))
        if net.theta_dim != problem.theta_dim or net.cond_dim != problem.cond_dim:
            raise FlowError(
                f"block ({start}, {end}): checkpoint dims (theta={net.theta_dim}, cond={net.cond_dim}) "
                f"do not match spec (theta={problem.theta_dim}, cond={problem.cond_dim})")
        draws = sample_posterior(net, problem.condition(y), L, stream)
        beta[:, start - 1:end] = draws[:, :-1].reshape(L, end - start + 1, p)
        sig[:, start - 1:end] = draws[:, -1:]
    return DrawSet(beta=beta, sigma2=sig[:, 0].copy(), sigma2_epoch=sig)
