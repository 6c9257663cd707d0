"""Explicit monotone finite-difference solver for the terminal-value HJI equations.

Solves ``V_t + H(D^2V, DV, x) = 0``, ``V(T, .) = g`` backward in time on a
box, with ``H`` the upper (``kind="plus"``) or lower (``kind="minus"``)
Hamiltonian over the control grids. One backward step is

    V^k = V^{k+1} + dt * (H_h(V^{k+1}) + sum_i theta_i * dx_i / 2 * D_ii V^{k+1})

where ``H_h`` is the control-grid inf-sup of the payoff with central first
differences, the central second difference on the diagonal, the
sign-selected 7-point cross stencil for mixed terms, and ``theta_i`` the
largest ``|b_i|`` over nodes and controls (global Lax-Friedrichs). Under the
CFL bound every node update is a nondecreasing function of the previous
level. Boundary nodes are held at ``g``.

``scheme="upwind"`` replaces the central first differences and the added
viscosity by one-sided differences chosen per control pair from the sign of
each drift component. It is less diffusive at kinks, but the per-pair
stencils no longer commute with the inf-sup, so the two sweeps can differ
even when the continuous Hamiltonians agree.

Supported dimensions are N = 1 and N = 2.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dynamics import GameDynamics
from .hamiltonian import inf_sup, sup_inf
from .path_space import ControlSet, TimeGrid

KINDS = ("plus", "minus")
SCHEMES = ("lax-friedrichs", "upwind")
MAGIC = b"VGRD"
FORMAT_VERSION = 1


class CFLError(ValueError):
    pass


class NonMonotoneStencil(ValueError):
    pass


class OutOfGrid(ValueError):
    """Interpolation requested outside the solved box."""


class SchemeBlowUp(FloatingPointError):
    pass


@dataclass(frozen=True, eq=False)
class SpaceGrid:
    lo: np.ndarray
    hi: np.ndarray
    nodes_per_dim: tuple

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        nodes = tuple(int(n) for n in np.atleast_1d(self.nodes_per_dim))
        if not (lo.shape == hi.shape and len(nodes) == lo.size):
            raise ValueError("lo, hi and nodes_per_dim must have one entry per dimension")
        if np.any(lo >= hi):
            raise ValueError("need lo < hi componentwise")
        if min(nodes) < 3:
            raise ValueError("need at least 3 nodes per dimension")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "nodes_per_dim", nodes)

    @classmethod
    def from_spacing(cls, lo, hi, dx) -> "SpaceGrid":
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        dx = np.broadcast_to(np.asarray(dx, dtype=float), lo.shape)
        nodes = np.rint((hi - lo) / dx).astype(int) + 1
        return cls(lo, hi, tuple(nodes))

    @property
    def N(self) -> int:
        return self.lo.size

    @property
    def dx(self) -> np.ndarray:
        return (self.hi - self.lo) / (np.asarray(self.nodes_per_dim) - 1)

    @property
    def shape(self) -> tuple:
        return self.nodes_per_dim

    @property
    def axes(self):
        return [np.linspace(l, h, n) for l, h, n in zip(self.lo, self.hi, self.nodes_per_dim)]

    def nodes(self) -> np.ndarray:
        """Node coordinates, shape ``shape + (N,)``."""
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)

    def coarsened(self) -> "SpaceGrid":
        """Every other node; requires an odd node count per axis."""
        if any(n % 2 == 0 for n in self.nodes_per_dim):
            raise ValueError("coarsening needs an odd number of nodes per axis")
        return SpaceGrid(self.lo, self.hi, tuple((n - 1) // 2 + 1 for n in self.nodes_per_dim))

    def refined(self) -> "SpaceGrid":
        return SpaceGrid(self.lo, self.hi, tuple(2 * (n - 1) + 1 for n in self.nodes_per_dim))

    def region_mask(self, region=None, include_boundary: bool = False) -> np.ndarray:
        """Boolean mask of nodes inside ``region = (lo, hi)``, boundary nodes excluded by default."""
        pts = self.nodes()
        mask = np.ones(self.shape, dtype=bool)
        if region is not None:
            rlo = np.broadcast_to(np.asarray(region[0], dtype=float), (self.N,))
            rhi = np.broadcast_to(np.asarray(region[1], dtype=float), (self.N,))
            tol = 1e-9 * np.maximum(1.0, np.abs(self.hi - self.lo))
            mask &= np.all((pts >= rlo - tol) & (pts <= rhi + tol), axis=-1)
        if not include_boundary:
            mask &= ~self.boundary_mask()
        return mask

    def boundary_mask(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        for ax in range(self.N):
            idx = [slice(None)] * self.N
            idx[ax] = 0
            m[tuple(idx)] = True
            idx[ax] = -1
            m[tuple(idx)] = True
        return m


@dataclass(eq=False)
class ValueGrid:
    """Value function samples ``values[i]`` at time ``times[i]`` (ascending)."""

    space: SpaceGrid
    times: np.ndarray
    values: np.ndarray
    kind: str
    theta: np.ndarray = field(default_factory=lambda: np.zeros(1))
    dt: float = float("nan")

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.values.shape != (len(self.times),) + self.space.shape:
            raise ValueError("values shape does not match times x space grid")
        self._deriv_cache = {}

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]

    def level(self, t: float) -> np.ndarray:
        i = int(np.argmin(np.abs(self.times - t)))
        if not math.isclose(self.times[i], t, rel_tol=0, abs_tol=1e-9):
            raise ValueError(f"time {t} is not a stored level")
        return self.values[i]

    def _time_weights(self, t):
        lo, hi = self.times[0], self.times[-1]
        tol = 1e-12 * max(1.0, abs(hi))
        if t < lo - tol or t > hi + tol:
            raise OutOfGrid(f"time {t} outside [{lo}, {hi}]")
        t = min(max(t, lo), hi)
        j = int(np.searchsorted(self.times, t, side="right")) - 1
        j = min(max(j, 0), len(self.times) - 2) if len(self.times) > 1 else 0
        if len(self.times) == 1:
            return 0, 0, 0.0
        span = self.times[j + 1] - self.times[j]
        lam = (t - self.times[j]) / span
        if lam <= 0.0:
            return j, j, 0.0
        if lam >= 1.0:
            return j + 1, j + 1, 0.0
        return j, j + 1, lam

    def interpolate_level(self, level: np.ndarray, x) -> np.ndarray:
        """Multilinear interpolation of one level at points ``x`` (shape (M, N) or (N,)).

        ``level`` may carry leading axes (stacked fields); they are kept.
        """
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        sp = self.space
        tol = 1e-9 * np.maximum(1.0, np.abs(sp.hi - sp.lo))
        bad = np.any((x < sp.lo - tol) | (x > sp.hi + tol), axis=1)
        if bad.any():
            raise OutOfGrid(f"{int(bad.sum())} point(s) outside the box [{sp.lo}, {sp.hi}], "
                            f"first {x[np.argmax(bad)]}")
        s = (np.clip(x, sp.lo, sp.hi) - sp.lo) / sp.dx
        i0 = np.minimum(np.floor(s).astype(int), np.asarray(sp.shape) - 2)
        frac = s - i0
        out = 0.0
        for corner in range(2 ** sp.N):
            w = 1.0
            idx = []
            for a in range(sp.N):
                bit = (corner >> a) & 1
                w = w * (frac[:, a] if bit else 1.0 - frac[:, a])
                idx.append(i0[:, a] + bit)
            out = out + w * level[(Ellipsis,) + tuple(idx)]
        return out[..., 0] if single else out

    def at(self, t: float, x):
        """Multilinear interpolation in (t, x); raises :class:`OutOfGrid` outside the box."""
        j0, j1, lam = self._time_weights(t)
        v0 = self.interpolate_level(self.values[j0], x)
        if lam == 0.0:
            return v0
        return (1.0 - lam) * v0 + lam * self.interpolate_level(self.values[j1], x)

    def derivatives_at(self, t: float, x):
        """Interpolated (DV, D^2V) at one point, from nodal central differences."""
        j0, j1, lam = self._time_weights(t)
        j = j0 if lam < 0.5 else j1
        N = self.space.N
        if j not in self._deriv_cache:
            lev = self.values[j]
            grads = np.gradient(lev, *self.space.dx) if N > 1 else [np.gradient(lev, self.space.dx[0])]
            hess = [np.gradient(gi, *self.space.dx) if N > 1 else [np.gradient(gi, self.space.dx[0])]
                    for gi in grads]
            self._deriv_cache[j] = np.stack(list(grads) + [h for row in hess for h in row])
        vals = self.interpolate_level(self._deriv_cache[j], np.asarray(x, dtype=float).reshape(N))
        A = vals[N:].reshape(N, N)
        return vals[:N], 0.5 * (A + A.T)

    # -- export ---------------------------------------------------------------

    def to_csv(self, path, every: int = 1) -> None:
        pts = self.space.nodes().reshape(-1, self.space.N)
        idx = list(range(0, len(self.times), every))
        if idx[-1] != len(self.times) - 1:
            idx.append(len(self.times) - 1)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time"] + [f"x_{i + 1}" for i in range(self.space.N)] + ["value"])
            for i in idx:
                vals = self.values[i].reshape(-1)
                for p, v in zip(pts, vals):
                    w.writerow([repr(float(self.times[i]))] + [repr(float(c)) for c in p] + [repr(float(v))])

    def to_binary(self, path) -> None:
        """Write the documented little-endian dump (see ``docs/valuegrid-format.md``)."""
        sp = self.space
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IBxxxII", FORMAT_VERSION, KINDS.index(self.kind), sp.N, len(self.times)))
            fh.write(struct.pack(f"<{sp.N}I", *sp.shape))
            fh.write(np.asarray(sp.lo, dtype="<f8").tobytes())
            fh.write(np.asarray(sp.dx, dtype="<f8").tobytes())
            fh.write(np.asarray(self.times, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())

    @classmethod
    def from_binary(cls, path) -> "ValueGrid":
        with open(path, "rb") as fh:
            buf = fh.read()
        if buf[:4] != MAGIC:
            raise ValueError("not a value grid dump")
        version, kind, N, nt = struct.unpack_from("<IBxxxII", buf, 4)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported format version {version}")
        off = 4 + struct.calcsize("<IBxxxII")
        shape = struct.unpack_from(f"<{N}I", buf, off)
        off += 4 * N
        lo = np.frombuffer(buf, "<f8", N, off); off += 8 * N
        dx = np.frombuffer(buf, "<f8", N, off); off += 8 * N
        times = np.frombuffer(buf, "<f8", nt, off); off += 8 * nt
        values = np.frombuffer(buf, "<f8", nt * int(np.prod(shape)), off).reshape((nt,) + tuple(shape))
        hi = lo + dx * (np.asarray(shape) - 1)
        return cls(SpaceGrid(lo, hi, shape), times.copy(), values.copy(), KINDS[kind])


# -- coefficients on the grid ---------------------------------------------------

@dataclass(frozen=True, eq=False)
class _Coefficients:
    b: np.ndarray      # (nU, nV) + shape + (N,)
    a: np.ndarray      # (nU, nV) + shape + (N, N), a = sigma sigma^T
    g: np.ndarray      # shape

    @property
    def theta(self) -> np.ndarray:
        N = self.b.shape[-1]
        return np.abs(self.b).reshape(-1, N).max(axis=0)


def _tabulate(dyn: GameDynamics, space: SpaceGrid, U: ControlSet, V: ControlSet) -> _Coefficients:
    if dyn.N != space.N:
        raise ValueError(f"dynamics dimension {dyn.N} does not match grid dimension {space.N}")
    pts = space.nodes().reshape(-1, space.N)
    nU, nV, M = len(U), len(V), len(pts)
    b = np.empty((nU, nV, M, dyn.N))
    a = np.empty((nU, nV, M, dyn.N, dyn.N))
    for i, u in enumerate(U.points):
        for j, v in enumerate(V.points):
            for m, x in enumerate(pts):
                bx, sx = dyn.coefficients(x, u, v)
                b[i, j, m] = bx
                a[i, j, m] = sx @ sx.T
    g = np.array([float(dyn.terminal_cost(x)) for x in pts])
    shape = space.shape
    return _Coefficients(b.reshape((nU, nV) + shape + (dyn.N,)),
                         a.reshape((nU, nV) + shape + (dyn.N, dyn.N)), g.reshape(shape))


def _cfl_limit(coef: _Coefficients, space: SpaceGrid) -> float:
    N = space.N
    dxm = float(space.dx.min())
    diag = np.diagonal(coef.a, axis1=-2, axis2=-1)
    amax = float(diag.max()) if diag.size else 0.0
    tsum = float(coef.theta.sum())
    lim = math.inf
    if amax > 0:
        lim = min(lim, dxm ** 2 / (N * amax))
    if tsum > 0:
        lim = min(lim, dxm / tsum)
    return lim


def cfl_dt(dyn: GameDynamics, space: SpaceGrid, U: ControlSet, V: ControlSet, c_cfl: float = 0.5) -> float:
    """Largest admissible time step ``c_cfl * min(dx^2 / (N max a_ii), dx / sum_i theta_i)``."""
    if not 0 < c_cfl <= 0.5:
        raise ValueError("c_cfl must lie in (0, 0.5]")
    return c_cfl * _cfl_limit(_tabulate(dyn, space, U, V), space)


def choose_time_grid(dyn, space, U, V, t0: float, T: float, c_cfl: float = 0.5) -> TimeGrid:
    dt = cfl_dt(dyn, space, U, V, c_cfl)
    n = 1 if math.isinf(dt) else max(1, math.ceil((T - t0) / dt - 1e-9))
    return TimeGrid(t0, T, n)


def _check_diagonal_dominance(coef: _Coefficients, space: SpaceGrid) -> None:
    if space.N < 2:
        return
    dx = space.dx
    a = coef.a
    for i in range(space.N):
        off = sum(np.abs(a[..., i, j]) / (dx[i] * dx[j]) for j in range(space.N) if j != i)
        excess = off - a[..., i, i] / dx[i] ** 2
        if np.any(excess > 1e-12 * (1 + np.abs(off))):
            raise NonMonotoneStencil(
                f"diffusion matrix is not diagonally dominant on the grid along axis {i}; "
                "the cross stencil would not be monotone")


def _shifted(V: np.ndarray, offsets) -> np.ndarray:
    """Interior view of ``V`` shifted by ``offsets`` (each in {-1, 0, 1})."""
    idx = tuple(slice(1 + o, V.shape[a] - 1 + o) for a, o in enumerate(offsets))
    return V[idx]


class _Stencil:
    def __init__(self, coef: _Coefficients, space: SpaceGrid, scheme: str):
        N = space.N
        self.upwind = scheme == "upwind"
        inner = (slice(None), slice(None)) + tuple(slice(1, -1) for _ in range(N))
        self.N = N
        self.dx = space.dx
        self.b = coef.b[inner]
        self.a = coef.a[inner]
        self.theta = coef.theta

    def payoff(self, V: np.ndarray) -> np.ndarray:
        N, dx = self.N, self.dx
        zero = (0,) * N
        Vc = _shifted(V, zero)
        out = 0.0
        lf = 0.0
        for i in range(N):
            e = [0] * N
            e[i] = 1
            Vp = _shifted(V, e)
            e[i] = -1
            Vm = _shifted(V, e)
            d2 = (Vp - 2 * Vc + Vm) / dx[i] ** 2
            bi = self.b[..., i]
            if self.upwind:
                drift = np.maximum(bi, 0) * ((Vp - Vc) / dx[i]) + np.minimum(bi, 0) * ((Vc - Vm) / dx[i])
            else:
                drift = bi * ((Vp - Vm) / (2 * dx[i]))
                lf = lf + 0.5 * self.theta[i] * dx[i] * d2
            out = out + drift + 0.5 * self.a[..., i, i] * d2
        if N == 2:
            s = lambda o: _shifted(V, o)
            cross = 2 * Vc - s((1, 0)) - s((-1, 0)) - s((0, 1)) - s((0, -1))
            dpos = (cross + s((1, 1)) + s((-1, -1))) / (2 * dx[0] * dx[1])
            dneg = -(cross + s((1, -1)) + s((-1, 1))) / (2 * dx[0] * dx[1])
            a12 = self.a[..., 0, 1]
            out = out + a12 * np.where(a12 >= 0, dpos, dneg)
        return out, lf


def _advance(st: _Stencil, reduce, Vk: np.ndarray, dt: float, interior) -> np.ndarray:
    pay, lf = st.payoff(Vk)
    H, _ = reduce(pay)
    new = Vk.copy()
    new[interior] = Vk[interior] + dt * (H + lf)
    return new


def backward_step(dyn: GameDynamics, space: SpaceGrid, U: ControlSet, V: ControlSet, kind: str,
                  level: np.ndarray, dt: float, scheme: str = "lax-friedrichs") -> np.ndarray:
    """One scheme update from an arbitrary level (boundary nodes are copied)."""
    coef = _tabulate(dyn, space, U, V)
    reduce = inf_sup if kind == "plus" else sup_inf
    interior = tuple(slice(1, -1) for _ in range(space.N))
    return _advance(_Stencil(coef, space, scheme), reduce, np.asarray(level, dtype=float), dt, interior)


def solve(dyn: GameDynamics, space: SpaceGrid, grid: TimeGrid, kind: str, U: ControlSet, V: ControlSet,
          c_cfl: float = 0.5, store_every: int = 1, scheme: str = "lax-friedrichs") -> ValueGrid:
    """Backward sweep from ``g`` at ``grid.T`` down to ``grid.t0``.

    ``scheme="lax-friedrichs"`` uses central first differences plus global
    artificial viscosity; the payoff stays affine in the drift, so pointwise
    equality of the upper and lower Hamiltonians carries over to the
    discrete sweep. ``scheme="upwind"`` upwinds the drift per control pair
    and adds no viscosity; it is sharper at kinks but the discrete payoff is
    no longer affine in the drift, so it can open a small discrete Isaacs gap.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"scheme must be one of {SCHEMES}")
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    if space.N > 2:
        raise ValueError("the grid solver supports N <= 2")
    if not 0 < c_cfl <= 0.5:
        raise ValueError("c_cfl must lie in (0, 0.5]")
    coef = _tabulate(dyn, space, U, V)
    _check_diagonal_dominance(coef, space)
    limit = c_cfl * _cfl_limit(coef, space)
    if grid.dt > limit * (1 + 1e-12):
        raise CFLError(f"dt={grid.dt:.6g} exceeds the CFL limit {limit:.6g}")
    st = _Stencil(coef, space, scheme)
    reduce = inf_sup if kind == "plus" else sup_inf
    interior = tuple(slice(1, -1) for _ in range(space.N))

    Vk = coef.g.copy()
    dt = grid.dt
    stored = [Vk.copy()]
    stored_t = [grid.T]
    for step in range(grid.n_steps - 1, -1, -1):
        new = _advance(st, reduce, Vk, dt, interior)
        if not np.all(np.isfinite(new)):
            bad = np.argwhere(~np.isfinite(new))[0]
            raise SchemeBlowUp(f"non-finite value at node {tuple(bad)} at time {grid.time(step)}")
        Vk = new
        if step % store_every == 0:
            stored.append(Vk.copy())
            stored_t.append(grid.time(step))
    return ValueGrid(space, np.array(stored_t[::-1]), np.array(stored[::-1]), kind, coef.theta, dt)


def solve_both(dyn, space, grid, U, V, c_cfl=0.5, store_every=1):
    return (solve(dyn, space, grid, "plus", U, V, c_cfl, store_every),
            solve(dyn, space, grid, "minus", U, V, c_cfl, store_every))


# -- reports ------------------------------------------------------------------

@dataclass
class RegularityReport:
    lipschitz_x: float
    holder_t: float


def estimate_regularity(vg: ValueGrid, region=None) -> RegularityReport:
    """Empirical spatial Lipschitz and 1/2-Hoelder-in-time constants.

    Spatial: largest ``|V(x + dx_i e_i) - V(x)| / dx_i`` over adjacent node
    pairs inside ``region`` at every stored level. Temporal: largest
    ``|V(t + s) - V(t)| / sqrt(s)`` over nodes inside ``region`` and dyadic
    lags ``s`` up to the full horizon.
    """
    sp = vg.space
    if len(vg.times) < 2 or min(sp.shape) < 3:
        raise ValueError("need at least two time levels and three nodes per axis")
    mask = sp.region_mask(region, include_boundary=True)
    lip = 0.0
    for ax in range(sp.N):
        diff = np.abs(np.diff(vg.values, axis=ax + 1)) / sp.dx[ax]
        lo = [slice(None)] * sp.N
        hi = [slice(None)] * sp.N
        lo[ax] = slice(None, -1)
        hi[ax] = slice(1, None)
        pair = mask[tuple(lo)] & mask[tuple(hi)]
        if pair.any():
            lip = max(lip, float(diff[:, pair].max()))
    vals = vg.values[:, mask]
    nt = len(vg.times)
    lags = sorted({min(2 ** j, nt - 1) for j in range(int(math.log2(nt - 1)) + 2)})
    hold = 0.0
    for lag in lags:
        dtl = vg.times[lag:] - vg.times[:-lag]
        ratio = np.abs(vals[lag:] - vals[:-lag]) / np.sqrt(dtl)[:, None]
        hold = max(hold, float(ratio.max()))
    return RegularityReport(lip, hold)


@dataclass
class OrderingReport:
    min_difference: float
    max_difference: float
    tolerance: float
    violated: bool
    worst_time: float
    worst_node: tuple


def compare_values(vplus: ValueGrid, vminus: ValueGrid, tolerance: float = 1e-9, region=None) -> OrderingReport:
    """Checks ``V- <= V+`` nodewise up to ``tolerance``."""
    if vplus.values.shape != vminus.values.shape or not np.array_equal(vplus.times, vminus.times):
        raise ValueError("value grids are on different grids")
    mask = vplus.space.region_mask(region, include_boundary=True)
    diff = vplus.values - vminus.values
    d = np.where(mask[None], diff, np.inf)
    i = np.unravel_index(int(np.argmin(d)), d.shape)
    mn = float(d[i])
    mx = float(np.where(mask[None], diff, -np.inf).max())
    return OrderingReport(mn, mx, tolerance, bool(mn < -tolerance), float(vplus.times[i[0]]),
                          tuple(int(j) for j in i[1:]))


def scheme_error_estimate(fine: ValueGrid, coarse: ValueGrid, times: Sequence[float], region=None) -> float:
    """Largest ``|fine - coarse|`` at the coarse nodes inside ``region`` and the given times.

    For a first-order scheme this tracks the error of the fine solution.
    """
    mask = coarse.space.region_mask(region, include_boundary=False)
    pts = coarse.space.nodes()[mask]
    worst = 0.0
    for t in times:
        worst = max(worst, float(np.max(np.abs(fine.at(t, pts) - coarse.at(t, pts)))))
    return worst
