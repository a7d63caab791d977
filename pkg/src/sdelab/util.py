"""Shared plumbing: counter-based RNG streams and fast uniform-grid interpolation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["make_rng", "UniformTable1D", "WeightedPoints", "weighted_mean_and_stderr"]


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Philox generator keyed by (seed, stream...).

    Philox is counter-based, so distinct (seed, stream) tuples give
    independent, reproducible streams regardless of draw order elsewhere.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class UniformTable1D:
    """Linear interpolant on a uniform grid with constant extension.

    Gather-based lookup, ~10x faster than np.interp for large batches since
    the index is computed arithmetically instead of by bisection.
    """

    x0: float
    h: float
    values: np.ndarray

    @property
    def x1(self) -> float:
        return self.x0 + self.h * (self.values.size - 1)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = (x - self.x0) * (1.0 / self.h)
        idx = np.clip(u.astype(np.int64), 0, self.values.size - 2)
        frac = np.clip(u - idx, 0.0, 1.0)
        lo = self.values[idx]
        return lo + (self.values[idx + 1] - lo) * frac


@dataclass(frozen=True)
class WeightedPoints:
    """A cloud of points in R^d with nonnegative weights summing to one."""

    points: np.ndarray   # (n, d)
    weights: np.ndarray  # (n,)

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size != pts.shape[0]:
            raise ValueError("weights must be one per point")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        total = w.sum()
        if not total > 0:
            raise ValueError("weights must have positive total mass")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w / total)

    @classmethod
    def equal(cls, points) -> "WeightedPoints":
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return cls(pts, np.full(pts.shape[0], 1.0 / pts.shape[0]))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def weighted_mean_and_stderr(per_replicate: np.ndarray) -> tuple[float, float]:
    """Mean and standard error over independent replicates (first axis)."""
    per_replicate = np.asarray(per_replicate, dtype=float)
    n = per_replicate.shape[0]
    mean = float(np.mean(per_replicate))
    if n < 2:
        return mean, float("nan")
    return mean, float(np.std(per_replicate, ddof=1) / np.sqrt(n))
