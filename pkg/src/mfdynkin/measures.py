"""Weighted empirical measures, measure flows and the 1-D Wasserstein kernel."""
from __future__ import annotations

import numpy as np

from .errors import EmptySample, LengthMismatch

WEIGHT_TOL = 1e-12


class Measure:
    """Finite weighted sample, possibly batched along leading axes.

    Atoms are stored sorted along the last axis so that every statistic is
    invariant under relabelling of the atoms, bit for bit.
    """

    def __init__(self, values, weights=None):
        values = np.asarray(values, dtype=float)
        if values.ndim == 0:
            values = values[None]
        n = values.shape[-1]
        if n == 0:
            raise EmptySample("measure needs at least one atom")
        if weights is None:
            self.uniform = True
            self.values = np.sort(values, axis=-1)
            self.weights = np.full(n, 1.0 / n)
            return
        weights = np.asarray(weights, dtype=float)
        if weights.shape[-1] != n:
            raise LengthMismatch(f"{n} atoms but {weights.shape[-1]} weights")
        if np.any(weights < 0):
            raise ValueError("weights must be nonnegative")
        if np.any(np.abs(weights.sum(axis=-1) - 1.0) > WEIGHT_TOL * max(1, n)):
            raise ValueError("weights must sum to one")
        weights = np.broadcast_to(weights, values.shape)
        order = np.argsort(values, axis=-1, kind="stable")
        self.uniform = False
        self.values = np.take_along_axis(values, order, axis=-1)
        self.weights = np.take_along_axis(weights, order, axis=-1)

    @classmethod
    def dirac(cls, value=0.0, batch_shape=()):
        return cls(np.full(tuple(batch_shape) + (1,), float(value)))

    @property
    def size(self) -> int:
        return self.values.shape[-1]

    @property
    def batch_shape(self):
        return self.values.shape[:-1]

    def mean(self):
        return np.sum(self.values * self.weights, axis=-1)

    def moment(self, p=2.0):
        return np.sum(np.abs(self.values) ** p * self.weights, axis=-1)

    def std(self):
        c = self.values - self.mean()[..., None]
        return np.sqrt(np.sum(c * c * self.weights, axis=-1))

    def quantile(self, q):
        """Left-continuous inverse CDF ``inf{x : F(x) >= q}`` (unbatched)."""
        cum = np.cumsum(self.weights, axis=-1)
        cum[..., -1] = 1.0
        idx = np.searchsorted(cum, np.asarray(q, dtype=float) - WEIGHT_TOL, side="left")
        return self.values[..., np.minimum(idx, self.size - 1)]

    def __getitem__(self, idx):
        w = self.weights if self.uniform else self.weights[idx]
        out = Measure.__new__(Measure)
        out.uniform = self.uniform
        out.values = self.values[idx]
        out.weights = w
        return out

    def __repr__(self):
        return f"Measure(size={self.size}, batch={self.batch_shape}, mean={self.mean()!r})"


def _quantile_coupling(a: Measure, b: Measure, p: float) -> float:
    ca = np.cumsum(a.weights)
    cb = np.cumsum(b.weights)
    ca[-1] = cb[-1] = 1.0
    grid = np.unique(np.concatenate([[0.0], ca, cb]))
    dq = np.diff(grid)
    mid = 0.5 * (grid[1:] + grid[:-1])
    qa = a.values[np.minimum(np.searchsorted(ca, mid, side="left"), a.size - 1)]
    qb = b.values[np.minimum(np.searchsorted(cb, mid, side="left"), b.size - 1)]
    return float(np.sum(dq * np.abs(qa - qb) ** p))


def _uniform_coupling(a: Measure, b: Measure, p: float):
    # uniform weights share one merged quantile grid across the batch
    na, nb = a.size, b.size
    grid = np.union1d(np.arange(na + 1) / na, np.arange(nb + 1) / nb)
    dq = np.diff(grid)
    mid = 0.5 * (grid[1:] + grid[:-1])
    ia = np.minimum((mid * na).astype(int), na - 1)
    ib = np.minimum((mid * nb).astype(int), nb - 1)
    diff = np.abs(a.values[..., ia] - b.values[..., ib]) ** p
    return diff @ dq


def wasserstein_pp(a: Measure, b: Measure, p: float = 2.0):
    """``W_p^p`` between two measures (batched when batch shapes agree)."""
    if p < 1:
        raise ValueError("p must be >= 1")
    if a.uniform and b.uniform:
        if a.size == b.size:
            return np.mean(np.abs(a.values - b.values) ** p, axis=-1)
        return _uniform_coupling(a, b, p)
    if a.batch_shape or b.batch_shape:
        shape = np.broadcast_shapes(a.batch_shape, b.batch_shape)
        out = np.empty(shape)
        for idx in np.ndindex(*shape):
            ia = idx[len(shape) - len(a.batch_shape):]
            ib = idx[len(shape) - len(b.batch_shape):]
            out[idx] = _quantile_coupling(a[ia] if ia else a, b[ib] if ib else b, p)
        return out
    return _quantile_coupling(a, b, p)


def wasserstein_p(a: Measure, b: Measure, p: float = 2.0):
    """Exact 1-D ``W_p`` through the quantile (monotone) coupling."""
    return wasserstein_pp(a, b, p) ** (1.0 / p)


def check_coupling_inequality(x, y, p: float = 2.0):
    """Compare ``W_p^p(L_n[x], L_n[y])`` with the index coupling ``mean |x - y|^p``.

    Returns ``(w, rhs, holds)``; the comparison allows rounding relative
    to the size of the cost.
    """
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size != y.size:
        raise LengthMismatch(f"lengths {x.size} and {y.size} differ")
    if x.size == 0:
        raise EmptySample("empty vectors")
    w = float(wasserstein_pp(Measure(x), Measure(y), p))
    rhs = float(np.mean(np.abs(x - y) ** p))
    return w, rhs, bool(w <= rhs + 1e-12 * max(1.0, rhs))


class MeasureFlow:
    """One measure per time step ``m = 0..M``."""

    def __init__(self, slices):
        self.slices = list(slices)
        if not self.slices:
            raise EmptySample("flow needs at least one slice")

    @classmethod
    def from_values(cls, lattice, values):
        """Marginal laws of a process given per step (node or path values)."""
        if lattice.backend == "tree":
            return cls(Measure(v, lattice.weights(m)) for m, v in enumerate(values))
        return cls(Measure(v) for v in values)

    @classmethod
    def dirac(cls, steps: int, value: float = 0.0, batch_shape=()):
        return cls(Measure.dirac(value, batch_shape) for _ in range(steps + 1))

    def __len__(self):
        return len(self.slices)

    def __getitem__(self, m) -> Measure:
        return self.slices[m]

    def __iter__(self):
        return iter(self.slices)

    def means(self) -> np.ndarray:
        return np.array([np.mean(s.mean()) for s in self.slices])

    def distance(self, other: "MeasureFlow", p: float = 2.0, steps=None) -> float:
        """``max_m W_p`` (maximum also over any batch axis)."""
        steps = range(len(self)) if steps is None else steps
        return max(float(np.max(wasserstein_p(self[m], other[m], p))) for m in steps)

    def replace(self, m, measure) -> "MeasureFlow":
        slices = list(self.slices)
        slices[m] = measure
        return MeasureFlow(slices)
