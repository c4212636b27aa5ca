"""Seeded random streams.

Every stochastic routine in the package takes an :class:`Rng`.  The stream is
numpy's PCG64 bit generator seeded through a ``SeedSequence``; child streams
are derived with ``SeedSequence.spawn`` so that concurrent callers never share
state.  PCG64 output is specified bit-for-bit, so a given seed reproduces the
same draws on any platform running the same numpy build.

Gamma variates come from numpy's ``standard_gamma`` (Marsaglia-Tsang squeeze
for shape >= 1, with the usual ``U**(1/a)`` boost below 1).  Multivariate
normals are ``mean + L @ z`` with ``L`` a Cholesky factor of the scale matrix.
"""

from __future__ import annotations

import numpy as np

ALGORITHM = "PCG64/SeedSequence"


class Rng:
    """A reproducible random stream."""

    def __init__(self, seed: int | np.random.SeedSequence = 0):
        if isinstance(seed, np.random.SeedSequence):
            self._ss = seed
            self.seed = int(seed.entropy) if isinstance(seed.entropy, int) else 0
        else:
            if seed < 0 or seed >= 2**64:
                raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
            self.seed = int(seed)
            self._ss = np.random.SeedSequence(self.seed)
        self.algorithm = ALGORITHM
        self.gen = np.random.Generator(np.random.PCG64(self._ss))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, algorithm={self.algorithm!r})"

    def spawn(self, n: int) -> list["Rng"]:
        """Independent child streams, deterministic given the parent seed."""
        return [Rng(child) for child in self._ss.spawn(n)]

    def normal(self, size=None) -> np.ndarray:
        return self.gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self.gen.uniform(low, high, size)

    def gamma(self, shape, rate, size=None) -> np.ndarray:
        """Gamma draws parameterised by shape and *rate*."""
        return self.gen.standard_gamma(shape, size) / rate

    def mvn(self, mean: np.ndarray, chol: np.ndarray, size: int | None = None) -> np.ndarray:
        """Draw from N(mean, chol @ chol.T).  ``size=None`` gives one vector."""
        p = mean.shape[-1]
        if size is None:
            return mean + chol @ self.gen.standard_normal(p)
        return mean + self.gen.standard_normal((size, p)) @ chol.T

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)


def as_rng(rng: Rng | int | None) -> Rng:
    if isinstance(rng, Rng):
        return rng
    return Rng(0 if rng is None else rng)
