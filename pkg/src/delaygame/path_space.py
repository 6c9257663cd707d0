"""Time grids, discretized control sets and Brownian noise paths.

Everything here is immutable after construction. Arrays handed out by the
path types are read-only views so a strategy cannot scribble on its inputs.

Discrete conventions used throughout the package:

* increment ``j`` of a :class:`BrownianPath` is ``W(t_{j+1}) - W(t_j)``;
  observing the noise on ``[t0, t_m]`` means seeing increments ``j < m``.
* value ``k`` of a :class:`ControlPath` is the control held on
  ``[t_k, t_{k+1})``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

SeedLike = Union[int, Sequence[int]]


_BRIDGE_KEY = 0xB61D6E


class GridMismatch(ValueError):
    """Two paths that must share a time grid do not."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on ``[t0, T]`` with the strategy delay counted in steps."""

    t0: float
    T: float
    n_steps: int
    delay_steps: int = 1

    def __post_init__(self):
        if not (np.isfinite(self.t0) and np.isfinite(self.T)) or not self.t0 < self.T:
            raise ValueError(f"need t0 < T, got t0={self.t0}, T={self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")
        if int(self.delay_steps) != self.delay_steps or self.delay_steps < 1:
            raise ValueError(f"delay_steps must be a positive integer, got {self.delay_steps}")
        if self.n_steps % self.delay_steps:
            raise ValueError(
                f"n_steps={self.n_steps} is not a multiple of delay_steps={self.delay_steps}")

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @property
    def n_blocks(self) -> int:
        return self.n_steps // self.delay_steps

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def time(self, step: int) -> float:
        return self.t0 + self.dt * step

    def with_delay(self, delay_steps: int) -> "TimeGrid":
        return TimeGrid(self.t0, self.T, self.n_steps, delay_steps)

    def refined(self) -> "TimeGrid":
        """Same interval and physical delay with half the step."""
        return TimeGrid(self.t0, self.T, 2 * self.n_steps, 2 * self.delay_steps)

    def step_of(self, t: float) -> int:
        """Index of the grid time equal to ``t`` (within roundoff)."""
        k = int(round((t - self.t0) / self.dt))
        if k < 0 or k > self.n_steps or not np.isclose(self.time(k), t, rtol=0, atol=1e-9 * max(1.0, abs(t))):
            raise ValueError(f"time {t} is not on the grid")
        return k


@dataclass(frozen=True, eq=False)
class ControlSet:
    """A finite, ordered set of control vectors (a discretized compact set)."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] == 0 or pts.shape[1] == 0:
            raise ValueError("a control set needs at least one point of positive dimension")
        if len(np.unique(pts, axis=0)) != len(pts):
            raise ValueError("control points must be pairwise distinct")
        object.__setattr__(self, "points", _frozen(pts))

    @property
    def ambient_dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]

    def __getitem__(self, i) -> np.ndarray:
        return self.points[i]

    def nearest(self, point) -> int:
        d = np.linalg.norm(self.points - np.asarray(point, dtype=float), axis=1)
        return int(np.argmin(d))

    def __eq__(self, other):
        return isinstance(other, ControlSet) and np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash(self.points.tobytes())

    def __repr__(self):
        return f"ControlSet({self.points.tolist()})"


def discretize_interval(lo: float, hi: float, m: int) -> ControlSet:
    """``m`` equally spaced points of ``[lo, hi]``, endpoints included."""
    if m <= 0:
        raise ValueError(f"m must be positive, got {m}")
    if lo > hi:
        raise ValueError(f"empty interval [{lo}, {hi}]")
    if m == 1:
        if lo != hi:
            return ControlSet(np.array([[0.5 * (lo + hi)]]))
        return ControlSet(np.array([[float(lo)]]))
    return ControlSet(np.linspace(lo, hi, m)[:, None])


def product_set(*sets: ControlSet) -> ControlSet:
    """Cartesian product of control sets, first factor varying slowest."""
    grids = np.meshgrid(*[np.arange(len(s)) for s in sets], indexing="ij")
    idx = [g.ravel() for g in grids]
    return ControlSet(np.hstack([s.points[i] for s, i in zip(sets, idx)]))


@dataclass(frozen=True, eq=False)
class BrownianPath:
    """One realization of the d-dimensional driving noise on a grid."""

    grid: TimeGrid
    increments: np.ndarray

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.ndim == 1:
            inc = inc[:, None]
        if inc.shape[0] != self.grid.n_steps:
            raise ValueError(f"expected {self.grid.n_steps} increments, got {inc.shape[0]}")
        object.__setattr__(self, "increments", _frozen(inc))

    @property
    def d(self) -> int:
        return self.increments.shape[1]

    @property
    def values(self) -> np.ndarray:
        return self.increments

    def cumulative(self) -> np.ndarray:
        """``W(t_k) - W(t0)`` for k = 0..n_steps; row 0 is zero."""
        out = np.zeros((self.grid.n_steps + 1, self.d))
        np.cumsum(self.increments, axis=0, out=out[1:])
        return out

    def with_suffix(self, step: int, new_increments) -> "BrownianPath":
        """Copy whose increments from ``step`` onward are replaced."""
        inc = np.array(self.increments)
        inc[step:] = np.asarray(new_increments, dtype=float).reshape(inc[step:].shape)
        return BrownianPath(self.grid, inc)

    def refine(self, seed: SeedLike) -> "BrownianPath":
        """Split each increment in two by Brownian-bridge sampling.

        The refined path lives on ``grid.refined()`` and sums back to the
        coarse increments pairwise. The bridge sampler uses its own spawn key,
        so it never reuses the stream of a path sampled with the same seed.
        """
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_BRIDGE_KEY,)))
        half = 0.5 * self.increments
        z = rng.standard_normal(self.increments.shape) * np.sqrt(self.grid.dt / 4.0)
        fine = np.empty((2 * self.grid.n_steps, self.d))
        fine[0::2] = half + z
        fine[1::2] = half - z
        return BrownianPath(self.grid.refined(), fine)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "time"] + [f"dW_{i + 1}" for i in range(self.d)])
            for k in range(self.grid.n_steps):
                w.writerow([k, repr(self.grid.time(k))] + [repr(float(x)) for x in self.increments[k]])


def sample_brownian(grid: TimeGrid, d: int, seed: SeedLike) -> BrownianPath:
    """Gaussian increments with variance ``dt`` per coordinate.

    Uses numpy's PCG64 seeded through ``SeedSequence(seed)``; ``seed`` may be
    an int or a tuple of ints such as ``(seed, path_index)``.
    """
    if not isinstance(grid, TimeGrid):
        raise TypeError("grid must be a TimeGrid")
    if int(d) != d or d < 1:
        raise ValueError(f"d must be a positive integer, got {d}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    return BrownianPath(grid, rng.standard_normal((grid.n_steps, int(d))) * np.sqrt(grid.dt))


@dataclass(frozen=True, eq=False)
class ControlPath:
    """Piecewise-constant control: ``values[k]`` indexes ``controls`` on step k."""

    grid: TimeGrid
    values: np.ndarray
    controls: ControlSet

    def __post_init__(self):
        vals = np.asarray(self.values)
        if vals.shape != (self.grid.n_steps,):
            raise ValueError(f"expected {self.grid.n_steps} control indices, got shape {vals.shape}")
        if not np.issubdtype(vals.dtype, np.integer):
            if not np.all(vals == np.round(vals)):
                raise ValueError("control path values must be integer indices")
        vals = vals.astype(np.int64)
        if vals.size and (vals.min() < 0 or vals.max() >= len(self.controls)):
            raise ValueError("control index out of range for the control set")
        object.__setattr__(self, "values", _frozen(vals))

    def points(self) -> np.ndarray:
        """Control vectors, shape (n_steps, ambient_dim)."""
        return self.controls.points[self.values]

    @classmethod
    def constant(cls, grid: TimeGrid, controls: ControlSet, index: int) -> "ControlPath":
        return cls(grid, np.full(grid.n_steps, index, dtype=np.int64), controls)


def prefix_equal(a, b, upto_step: int) -> bool:
    """True iff entries with index < ``upto_step`` are exactly equal."""
    if type(a) is not type(b):
        raise TypeError("prefix_equal compares two paths of the same kind")
    if a.grid != b.grid:
        raise GridMismatch(f"{a.grid} != {b.grid}")
    if not 0 <= upto_step <= a.grid.n_steps:
        raise ValueError(f"upto_step={upto_step} outside [0, {a.grid.n_steps}]")
    return bool(np.array_equal(a.values[:upto_step], b.values[:upto_step]))


def in_delayed_class(generator: Callable[[BrownianPath], ControlPath], w: BrownianPath,
                     delay_steps: int, trials: int = 8, seed: SeedLike = 0) -> bool:
    """Randomized check that ``generator`` produces delay-adapted controls.

    For block-aligned cut points ``m``, the noise is resampled from step
    ``m`` on; the generated values on steps ``< m + delay_steps`` must not
    move. Cuts are block-aligned because strategies resolve whole delay
    blocks at a time.
    """
    if w.grid.n_steps % delay_steps:
        raise ValueError("delay_steps must divide n_steps")
    base = generator(w).values
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    cuts = np.arange(0, w.grid.n_steps, delay_steps)
    for _ in range(trials):
        for m in cuts:
            fresh = rng.standard_normal((w.grid.n_steps - m, w.d)) * np.sqrt(w.grid.dt)
            other = generator(w.with_suffix(int(m), fresh)).values
            if not np.array_equal(base[: m + delay_steps], other[: m + delay_steps]):
                return False
    return True
