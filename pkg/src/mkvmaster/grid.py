"""Uniform time grids and counter-based Gaussian streams."""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

__all__ = ["TimeGrid", "normal_stream", "brownian_increments"]

# stream tags kept apart from step indices (which are >= 0)
INIT_STREAM = -1


@dataclass(frozen=True)
class TimeGrid:
    """Nodes ``t_k = t0 + k * dt`` for ``k = 0..K`` with ``dt = (T - t0) / K``.

    ``start_index`` is the global index of node 0; it keys the noise streams so
    that a sub-grid sees exactly the increments of the enclosing grid.
    """

    t0: float
    T: float
    K: int
    start_index: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.t0) and np.isfinite(self.T)) or self.T <= self.t0:
            raise InvalidInputError(f"need T > t0, got t0={self.t0}, T={self.T}")
        if int(self.K) != self.K or self.K < 1:
            raise InvalidInputError(f"K must be a positive integer, got {self.K}")
        object.__setattr__(self, "K", int(self.K))
        object.__setattr__(self, "t0", float(self.t0))
        object.__setattr__(self, "T", float(self.T))

    @property
    def dt(self):
        return (self.T - self.t0) / self.K

    @property
    def nodes(self):
        return self.t0 + self.dt * np.arange(self.K + 1)

    def time(self, k):
        if k == self.K:
            return self.T
        return self.t0 + self.dt * k

    def index_of(self, t, tol=1e-9):
        """Index of the node equal to ``t`` (within ``tol * dt``)."""
        k = int(round((t - self.t0) / self.dt))
        if k < 0 or k > self.K or abs(self.time(k) - t) > tol * self.dt:
            raise InvalidInputError(f"t={t} is not a node of {self}")
        return k

    def locate(self, t):
        """Return ``(k, w)`` with ``t = (1 - w) t_k + w t_{k+1}``, ``0 <= w <= 1``."""
        if t < self.t0 - 1e-12 * max(1.0, abs(self.t0)) or t > self.T + 1e-12 * max(1.0, abs(self.T)):
            raise InvalidInputError(f"t={t} outside [{self.t0}, {self.T}]")
        s = (t - self.t0) / self.dt
        k = min(max(int(np.floor(s)), 0), self.K - 1)
        w = min(max(s - k, 0.0), 1.0)
        return k, w

    def sub(self, k0, k1):
        """Sub-grid made of nodes ``k0..k1`` (inclusive)."""
        if not 0 <= k0 < k1 <= self.K:
            raise InvalidInputError(f"invalid sub-grid [{k0}, {k1}] of K={self.K}")
        return TimeGrid(self.time(k0), self.time(k1), k1 - k0, self.start_index + k0)

    def same_as(self, other):
        return (
            self.K == other.K
            and np.isclose(self.t0, other.t0, rtol=0, atol=1e-12)
            and np.isclose(self.T, other.T, rtol=0, atol=1e-12)
        )


def normal_stream(seed, tag, shape):
    """Standard normals from a Philox stream keyed by ``(seed, tag)``.

    Each key gives an independent stream, so draws do not depend on the order
    in which keys are consumed.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(tag) & 0xFFFFFFFF, 0x6D6B76])
    return np.random.Generator(np.random.Philox(ss)).standard_normal(shape)


def brownian_increments(seed, grid, n, d, moment_matching=False):
    """``(n, K, d)`` Brownian increments on ``grid``.

    Step ``k`` of the grid draws from the stream keyed by its global index
    ``grid.start_index + k``; row ``i`` of that draw belongs to particle ``i``.
    With ``moment_matching`` each step is centred and rescaled per coordinate
    so the empirical mean is 0 and the empirical variance is exactly ``dt``.
    """
    out = np.empty((n, grid.K, d))
    sq = np.sqrt(grid.dt)
    for k in range(grid.K):
        z = normal_stream(seed, grid.start_index + k, (n, d))
        if moment_matching and n > 1:
            z = z - z.mean(axis=0)
            s = np.sqrt(np.mean(z**2, axis=0))
            z = z / np.where(s > 0, s, 1.0)
        out[:, k, :] = sq * z
    return out
