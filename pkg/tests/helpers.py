import numpy as np

from abidlm.dlm import DlmSpec
from abidlm.rng import Rng


def spd(rng: Rng, k: int, jitter: float = 0.5) -> np.ndarray:
    A = rng.normal((k, k))
    return A @ A.T / k + jitter * np.eye(k)


def random_spec(rng: Rng, T: int, p: int, n, a0=None, b0=None, zero_noise=False) -> DlmSpec:
    n = [n] * T if np.isscalar(n) else list(n)
    return DlmSpec(
        X=[rng.normal((nt, p)) for nt in n],
        G=[np.eye(p) + 0.2 * rng.normal((p, p)) for _ in range(T)],
        V=[spd(rng, nt) for nt in n],
        W=[np.zeros((p, p)) if zero_noise else 0.3 * spd(rng, p) for _ in range(T)],
        m0=rng.normal(p),
        M0=spd(rng, p),
        a0=float(a0 if a0 is not None else rng.uniform(1.5, 5.0)),
        b0=float(b0 if b0 is not None else rng.uniform(0.5, 3.0)),
    )


def simulate_y(spec: DlmSpec, rng: Rng):
    from abidlm.dlm import dlm_prior_draw, y_from_dlm_batch

    beta, sigma2 = dlm_prior_draw(spec, rng)
    y = [yt[0] for yt in y_from_dlm_batch(beta[None], np.array([sigma2]), spec.X, spec.V, rng)]
    return beta, sigma2, y
