"""Conditional affine coupling flow with hand-written gradients.

A network is Lambda single coupling blocks with a fixed permutation between
consecutive blocks.  Block k splits its input u into u1 = u[:d//2] and
u2 = u[d//2:] and maps

    v1 = u1
    v2 = u2 * exp(g([u1; y])) + r([u1; y])

where y is the conditioning vector and g, r are one-hidden-layer ReLU
perceptrons ``Wo @ relu(W @ x)``.  The log-Jacobian of a block is sum(g).
Permutation k (1-based) swaps the two halves when k is odd and is a seeded
random shuffle when k is even.

Parameters are ordered block by block as (g.W, g.Wo, r.W, r.Wo); a
``GradientSet`` uses the same order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import Rng

CHECKPOINT_FORMAT = "abidlm.flow"
CHECKPOINT_VERSION = 1
SCALE_CLAMP = 10.0


class FlowError(ValueError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


@dataclass
class SubNetwork:
    W: np.ndarray  # (hidden, in)
    Wo: np.ndarray  # (out, hidden)


@dataclass
class CouplingBlock:
    g: SubNetwork
    r: SubNetwork
    d: int

    @property
    def split(self) -> tuple[int, int]:
        return self.d // 2, self.d - self.d // 2


def subnet_eval(x: np.ndarray, net: SubNetwork) -> np.ndarray:
    """``Wo @ relu(W @ x)`` for a vector or a batch of row vectors."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.W.shape[1]:
        raise FlowError(f"subnetwork expects input length {net.W.shape[1]}, got {x.shape[-1]}")
    return np.maximum(x @ net.W.T, 0.0) @ net.Wo.T


def half_swap(d: int) -> np.ndarray:
    h = d // 2
    return np.concatenate([np.arange(h, d), np.arange(0, h)])


def apply_perm(v: np.ndarray, perm: np.ndarray) -> np.ndarray:
    return v[..., perm]


def invert_perm(u: np.ndarray, perm: np.ndarray) -> np.ndarray:
    out = np.empty_like(u)
    out[..., perm] = u
    return out


@dataclass
class FlowNetwork:
    blocks: list[CouplingBlock]
    perms: list[np.ndarray]
    theta_dim: int
    cond_dim: int
    clamp: float = SCALE_CLAMP
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.perms) != max(len(self.blocks) - 1, 0):
            raise FlowError(f"{len(self.blocks)} blocks need {len(self.blocks) - 1} permutations, got {len(self.perms)}")
        for P in self.perms:
            if sorted(P.tolist()) != list(range(self.theta_dim)):
                raise FlowError("permutation is not a bijection of the parameter coordinates")

    @property
    def depth(self) -> int:
        return len(self.blocks)

    @property
    def hidden(self) -> int:
        return self.blocks[0].g.W.shape[0]

    @classmethod
    def create(cls, theta_dim: int, cond_dim: int, depth: int = 4, hidden: int = 128,
               rng: Rng | None = None, zero_output: bool = True, clamp: float = SCALE_CLAMP) -> "FlowNetwork":
        """Fresh network.

        Hidden weights are U(-1/sqrt(fan_in), 1/sqrt(fan_in)); output weights
        are zero unless ``zero_output=False``, so a new network is the
        identity up to the permutations.
        """
        rng = rng or Rng(0)
        d = theta_dim
        h1, h2 = d // 2, d - d // 2
        fan_in = h1 + cond_dim

        def subnet():
            bound = 1.0 / np.sqrt(max(fan_in, 1))
            W = rng.uniform(-bound, bound, (hidden, fan_in))
            if zero_output:
                Wo = np.zeros((h2, hidden))
            else:
                ob = 1.0 / np.sqrt(hidden)
                Wo = rng.uniform(-ob, ob, (h2, hidden))
            return SubNetwork(W, Wo)

        blocks = [CouplingBlock(g=subnet(), r=subnet(), d=d) for _ in range(depth)]
        perms = []
        for k in range(1, depth):
            perms.append(half_swap(d) if k % 2 == 1 else rng.permutation(d))
        return cls(blocks, perms, theta_dim, cond_dim, clamp)

    def params(self) -> list[np.ndarray]:
        """Weight arrays in gradient order (live references)."""
        out = []
        for blk in self.blocks:
            out += [blk.g.W, blk.g.Wo, blk.r.W, blk.r.Wo]
        return out

    def copy(self) -> "FlowNetwork":
        blocks = [CouplingBlock(SubNetwork(b.g.W.copy(), b.g.Wo.copy()),
                                SubNetwork(b.r.W.copy(), b.r.Wo.copy()), b.d) for b in self.blocks]
        return FlowNetwork(blocks, [p.copy() for p in self.perms], self.theta_dim, self.cond_dim,
                           self.clamp, dict(self.meta))


@dataclass
class GradientSet:
    """Loss gradients in the network's parameter order."""

    arrays: list[np.ndarray]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays]) if self.arrays else np.zeros(0)

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(a * a)) for a in self.arrays)))

    def scaled(self, factor: float) -> "GradientSet":
        return GradientSet([a * factor for a in self.arrays])

    def __add__(self, other: "GradientSet") -> "GradientSet":
        return GradientSet([a + b for a, b in zip(self.arrays, other.arrays)])


def _as_batch(theta, cond, net: FlowNetwork):
    theta = np.asarray(theta, dtype=float)
    single = theta.ndim == 1
    theta = np.atleast_2d(theta)
    cond = np.asarray(cond if cond is not None else np.zeros((theta.shape[0], 0)), dtype=float)
    cond = np.atleast_2d(cond)
    if cond.shape[0] == 1 and theta.shape[0] > 1:
        cond = np.broadcast_to(cond, (theta.shape[0], cond.shape[1]))
    if theta.shape[1] != net.theta_dim:
        raise FlowError(f"parameter vector has length {theta.shape[1]}, network expects {net.theta_dim}")
    if cond.shape[1] != net.cond_dim:
        raise FlowError(f"condition vector has length {cond.shape[1]}, network expects {net.cond_dim}")
    if cond.shape[0] != theta.shape[0]:
        raise FlowError("parameter and condition batches differ in size")
    return theta, cond, single


def _coupling_terms(u1, cond, block: CouplingBlock, clamp: float):
    x = np.concatenate([u1, cond], axis=1)
    ag = x @ block.g.W.T
    hg = np.maximum(ag, 0.0)
    s_raw = hg @ block.g.Wo.T
    ar = x @ block.r.W.T
    hr = np.maximum(ar, 0.0)
    shift = hr @ block.r.Wo.T
    if not (np.all(np.isfinite(s_raw)) and np.all(np.isfinite(shift))):
        bad = np.where(~(np.isfinite(s_raw).all(1) & np.isfinite(shift).all(1)))[0]
        raise FlowError("non-finite subnetwork output", int(bad[0]))
    s = np.clip(s_raw, -clamp, clamp)
    return x, ag, hg, s_raw, s, ar, hr, shift


def scb_forward(u, block: CouplingBlock, cond, clamp: float = SCALE_CLAMP):
    """Forward pass of one coupling block; returns ``(v, logdet)``."""
    u = np.asarray(u, dtype=float)
    single = u.ndim == 1
    U = np.atleast_2d(u)
    C = np.atleast_2d(np.asarray(cond, dtype=float)).reshape(U.shape[0], -1) if np.size(cond) else np.zeros((U.shape[0], 0))
    h = block.split[0]
    _, _, _, _, s, _, _, shift = _coupling_terms(U[:, :h], C, block, clamp)
    V = np.concatenate([U[:, :h], U[:, h:] * np.exp(s) + shift], axis=1)
    ld = s.sum(axis=1)
    return (V[0], float(ld[0])) if single else (V, ld)


def scb_inverse(v, block: CouplingBlock, cond, clamp: float = SCALE_CLAMP):
    """Inverse of :func:`scb_forward`."""
    v = np.asarray(v, dtype=float)
    single = v.ndim == 1
    Vb = np.atleast_2d(v)
    C = np.atleast_2d(np.asarray(cond, dtype=float)).reshape(Vb.shape[0], -1) if np.size(cond) else np.zeros((Vb.shape[0], 0))
    h = block.split[0]
    _, _, _, _, s, _, _, shift = _coupling_terms(Vb[:, :h], C, block, clamp)
    U = np.concatenate([Vb[:, :h], (Vb[:, h:] - shift) * np.exp(-s)], axis=1)
    if not np.all(np.isfinite(U)):
        raise FlowError("non-finite value in coupling inverse")
    return U[0] if single else U


def _forward(net: FlowNetwork, theta: np.ndarray, cond: np.ndarray, keep: bool):
    U = theta
    logdet = np.zeros(theta.shape[0])
    caches = []
    last = net.depth - 1
    for k, blk in enumerate(net.blocks):
        h = blk.split[0]
        u1, u2 = U[:, :h], U[:, h:]
        x, ag, hg, s_raw, s, ar, hr, shift = _coupling_terms(u1, cond, blk, net.clamp)
        es = np.exp(s)
        V = np.concatenate([u1, u2 * es + shift], axis=1)
        logdet += s.sum(axis=1)
        if keep:
            caches.append((x, ag, hg, s_raw, ar, hr, es, u2))
        U = apply_perm(V, net.perms[k]) if k < last else V
    return U, logdet, caches


def flow_forward(theta, cond, net: FlowNetwork):
    """theta -> latent z.  Returns ``(z, logdet)`` for a vector or a batch."""
    theta, cond, single = _as_batch(theta, cond, net)
    z, ld, _ = _forward(net, theta, cond, keep=False)
    return (z[0], float(ld[0])) if single else (z, ld)


def flow_inverse(z, cond, net: FlowNetwork):
    """latent z -> theta, the exact inverse of :func:`flow_forward`."""
    z, cond, single = _as_batch(z, cond, net)
    V = z
    for k in range(net.depth - 1, -1, -1):
        if k < net.depth - 1:
            V = invert_perm(V, net.perms[k])
        V = scb_inverse(V, net.blocks[k], cond, net.clamp)
    return V[0] if single else V


def per_sample_loss(net: FlowNetwork, theta_batch, cond_batch) -> np.ndarray:
    theta, cond, _ = _as_batch(theta_batch, cond_batch, net)
    z, ld, _ = _forward(net, theta, cond, keep=False)
    return 0.5 * np.sum(z * z, axis=1) - ld


def loss(net: FlowNetwork, theta_batch, cond_batch) -> float:
    """Mean over the batch of 0.5*||f(theta; y)||^2 - log|det J|."""
    terms = per_sample_loss(net, theta_batch, cond_batch)
    bad = np.where(~np.isfinite(terms))[0]
    if bad.size:
        raise FlowError(f"non-finite loss at batch index {bad[0]}", int(bad[0]))
    return float(np.mean(terms))


def loss_and_grad(net: FlowNetwork, theta_batch, cond_batch) -> tuple[float, GradientSet]:
    """Loss and its exact gradient from one cached forward pass and one backward sweep.

    Each block's output gradient is routed back through the permutation to
    the blocks that consumed it, the scale path picks up the direct -1/M
    contribution of the log-determinant term, and ReLU derivatives use
    H(0) = 0.  Scale outputs outside the clamp band get zero gradient.
    Condition entries are treated as constants.
    """
    theta, cond, _ = _as_batch(theta_batch, cond_batch, net)
    B = theta.shape[0]
    if B == 0:
        raise FlowError("empty batch")
    z, ld, caches = _forward(net, theta, cond, keep=True)
    terms = 0.5 * np.sum(z * z, axis=1) - ld
    bad = np.where(~np.isfinite(terms))[0]
    if bad.size:
        raise FlowError(f"non-finite loss at batch index {bad[0]}", int(bad[0]))
    grads: list[np.ndarray] = [None] * (4 * net.depth)  # type: ignore[list-item]
    dU = z / B
    for k in range(net.depth - 1, -1, -1):
        blk = net.blocks[k]
        h = blk.split[0]
        dV = invert_perm(dU, net.perms[k]) if k < net.depth - 1 else dU
        x, ag, hg, s_raw, ar, hr, es, u2 = caches[k]
        dv1, dv2 = dV[:, :h], dV[:, h:]
        du2 = dv2 * es
        ds = (dv2 * u2 * es - 1.0 / B) * ((s_raw > -net.clamp) & (s_raw < net.clamp))
        dshift = dv2
        g_Wo = ds.T @ hg
        dag = (ds @ blk.g.Wo) * (ag > 0)
        g_W = dag.T @ x
        r_Wo = dshift.T @ hr
        dar = (dshift @ blk.r.Wo) * (ar > 0)
        r_W = dar.T @ x
        dx = dag @ blk.g.W + dar @ blk.r.W
        dU = np.concatenate([dv1 + dx[:, :h], du2], axis=1)
        grads[4 * k: 4 * k + 4] = [g_W, g_Wo, r_W, r_Wo]
    return float(np.mean(terms)), GradientSet(grads)


def backprop(net: FlowNetwork, theta_batch, cond_batch) -> GradientSet:
    return loss_and_grad(net, theta_batch, cond_batch)[1]


def activation_pattern(net: FlowNetwork, theta_batch, cond_batch) -> np.ndarray:
    """Signs of every hidden pre-activation and clamp state, flattened.

    Two parameter settings with equal patterns lie on the same smooth piece
    of the loss, which is what a finite-difference check needs.
    """
    theta, cond, _ = _as_batch(theta_batch, cond_batch, net)
    _, _, caches = _forward(net, theta, cond, keep=True)
    parts = []
    for x, ag, hg, s_raw, ar, hr, es, u2 in caches:
        parts += [(ag > 0).ravel(), (ar > 0).ravel(), (np.abs(s_raw) < net.clamp).ravel()]
    return np.concatenate(parts)


def _payload(net: FlowNetwork) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "theta_dim": net.theta_dim,
        "cond_dim": net.cond_dim,
        "depth": net.depth,
        "hidden": net.hidden,
        "clamp": net.clamp,
        "perms": [p.tolist() for p in net.perms],
        "blocks": [
            {"g": {"W": b.g.W.tolist(), "Wo": b.g.Wo.tolist()},
             "r": {"W": b.r.W.tolist(), "Wo": b.r.Wo.tolist()}}
            for b in net.blocks
        ],
        "meta": net.meta,
    }


def _digest(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return "sha256:" + hashlib.sha256(blob).hexdigest()


def save_checkpoint(net: FlowNetwork, path: str | Path) -> None:
    payload = _payload(net)
    payload["checksum"] = _digest(payload)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, sort_keys=True) + "\n")
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> FlowNetwork:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise FlowError(f"{path}: not a version-{CHECKPOINT_VERSION} flow checkpoint")
    checksum = payload.pop("checksum", None)
    if checksum != _digest(payload):
        raise FlowError(f"{path}: checksum mismatch")
    d, c = payload["theta_dim"], payload["cond_dim"]
    blocks = []
    for b in payload["blocks"]:
        g = SubNetwork(np.array(b["g"]["W"], dtype=float).reshape(payload["hidden"], -1),
                       np.array(b["g"]["Wo"], dtype=float).reshape(d - d // 2, -1))
        r = SubNetwork(np.array(b["r"]["W"], dtype=float).reshape(payload["hidden"], -1),
                       np.array(b["r"]["Wo"], dtype=float).reshape(d - d // 2, -1))
        blocks.append(CouplingBlock(g, r, d))
    perms = [np.array(p, dtype=int) for p in payload["perms"]]
    return FlowNetwork(blocks, perms, d, c, float(payload["clamp"]), payload["meta"])
