"""Controlled SDE ``dX = b(X,u,v) dt + sigma(X,u,v) dW`` and its Euler-Maruyama map.

The discrete solution map is the Euler recursion itself. It is a
deterministic function of (control paths, noise path), and the state at step
k only reads inputs with index < k, which is what makes it usable by a
strategy that observes the noise and the opponent's realized controls.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .path_space import BrownianPath, ControlPath, ControlSet, GridMismatch, TimeGrid


class NonFiniteState(FloatingPointError):
    """The Euler recursion produced inf or nan."""

    def __init__(self, step, state):
        super().__init__(f"non-finite state at step {step}: {state}")
        self.step = step
        self.state = state


class DeclaredConstantError(ValueError):
    """A probed coefficient exceeds its declared bound or Lipschitz constant."""


@dataclass(frozen=True)
class GameDynamics:
    """Coefficients of the game and its terminal cost.

    ``drift(x, u, v)`` returns shape (N,), ``diffusion(x, u, v)`` shape
    (N, d), ``terminal_cost(x)`` a float. ``x``, ``u``, ``v`` are 1-d arrays.
    ``lip_const``/``bound_const`` are the declared Lipschitz constant in the
    state and sup bound of the coefficients; ``cost_lip``/``cost_bound`` play
    the same role for the terminal cost. They are checked by probing, see
    :func:`probe_constants`.
    """

    drift: Callable
    diffusion: Callable
    terminal_cost: Callable
    N: int
    d: int
    lip_const: float = np.inf
    bound_const: float = np.inf
    cost_lip: float = np.inf
    cost_bound: float = np.inf
    name: str = "custom"

    def __post_init__(self):
        if self.N < 1 or self.d < 1:
            raise ValueError("N and d must be positive")

    def coefficients(self, x, u, v):
        b = np.asarray(self.drift(x, u, v), dtype=float).reshape(self.N)
        s = np.asarray(self.diffusion(x, u, v), dtype=float).reshape(self.N, self.d)
        return b, s


def probe_constants(dyn: GameDynamics, U: ControlSet, V: ControlSet, lo, hi,
                    n_pairs: int = 1000, seed: int = 0) -> None:
    """Spot-check the declared constants on random state pairs in a box.

    Raises :class:`DeclaredConstantError` on the first violation found.
    """
    rng = np.random.default_rng(seed)
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (dyn.N,))
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (dyn.N,))
    slack = 1e-9
    for _ in range(n_pairs):
        x = rng.uniform(lo, hi)
        y = rng.uniform(lo, hi)
        u = U[rng.integers(len(U))]
        v = V[rng.integers(len(V))]
        bx, sx = dyn.coefficients(x, u, v)
        by, sy = dyn.coefficients(y, u, v)
        dist = np.linalg.norm(x - y)
        size = max(np.linalg.norm(bx), np.linalg.norm(sx))
        if size > dyn.bound_const * (1 + slack) + slack:
            raise DeclaredConstantError(
                f"{dyn.name}: coefficient size {size:.6g} at x={x} exceeds bound {dyn.bound_const}")
        gap = max(np.linalg.norm(bx - by), np.linalg.norm(sx - sy))
        if gap > dyn.lip_const * dist * (1 + slack) + slack:
            raise DeclaredConstantError(
                f"{dyn.name}: coefficient Lipschitz ratio {gap / dist:.6g} exceeds {dyn.lip_const}")
        gx, gy = float(dyn.terminal_cost(x)), float(dyn.terminal_cost(y))
        if abs(gx) > dyn.cost_bound * (1 + slack) + slack:
            raise DeclaredConstantError(f"{dyn.name}: |g(x)|={abs(gx):.6g} exceeds {dyn.cost_bound}")
        if abs(gx - gy) > dyn.cost_lip * dist * (1 + slack) + slack:
            raise DeclaredConstantError(
                f"{dyn.name}: terminal cost Lipschitz ratio {abs(gx - gy) / dist:.6g} exceeds {dyn.cost_lip}")


@dataclass(frozen=True, eq=False)
class StatePath:
    grid: TimeGrid
    states: np.ndarray

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]

    def to_csv(self, path) -> None:
        n = self.states.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "time"] + [f"x_{i + 1}" for i in range(n)])
            for k, row in enumerate(self.states):
                w.writerow([k, repr(self.grid.time(k))] + [repr(float(x)) for x in row])


def _check_x0(dyn, x0):
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape != (dyn.N,):
        raise ValueError(f"x0 has {x0.size} components, dynamics expects {dyn.N}")
    return x0


def integrate(dyn: GameDynamics, x0, u: ControlPath, v: ControlPath, w: BrownianPath) -> StatePath:
    """Explicit Euler-Maruyama along given control and noise paths."""
    grid = w.grid
    if u.grid != grid or v.grid != grid:
        raise GridMismatch("control and noise paths must share one grid")
    if w.d != dyn.d:
        raise ValueError(f"noise has dimension {w.d}, dynamics expects {dyn.d}")
    x0 = _check_x0(dyn, x0)
    up, vp, dW = u.points(), v.points(), w.increments
    dt = grid.dt
    states = np.empty((grid.n_steps + 1, dyn.N))
    states[0] = x0
    x = x0
    for k in range(grid.n_steps):
        b, s = dyn.coefficients(x, up[k], vp[k])
        x = x + b * dt + s @ dW[k]
        if not np.all(np.isfinite(x)):
            raise NonFiniteState(k + 1, x)
        states[k + 1] = x
    return StatePath(grid, states)


def euler_step(dyn: GameDynamics, x, u, v, dt, dW):
    b, s = dyn.coefficients(x, u, v)
    return x + b * dt + s @ dW


def pathwise_map(dyn: GameDynamics, x0, strat, opponent: ControlPath, w: BrownianPath) -> StatePath:
    """State path produced by ``strat`` facing the realized ``opponent`` controls.

    The strategy is applied block by block through guarded prefix views, so a
    strategy reading beyond its delay raises ``DelayViolation`` here. The
    result at step k depends only on ``opponent`` and ``w`` before step k.
    """
    from .strategies import apply_strategy

    own = apply_strategy(strat, w, opponent)
    if strat.side == "I":
        return integrate(dyn, x0, own, opponent, w)
    return integrate(dyn, x0, opponent, own, w)


# -- built-in scenarios ------------------------------------------------------

def _zero_drift(n):
    z = np.zeros(n)
    return lambda x, u, v: z


def _terminal(spec, n):
    """Terminal cost from a descriptor ``{"name": ..., ...}``.

    Returns (g, lipschitz, bound) where the constants are valid on the box
    ``|x_i| <= radius``.
    """
    name = spec.get("name", "quadratic")
    radius = float(spec.get("radius", 4.0))
    if name == "quadratic":
        return (lambda x: float(np.dot(x, x)), 2 * radius * np.sqrt(n), n * radius ** 2)
    if name == "abs":
        return (lambda x: float(np.linalg.norm(x)), 1.0, radius * np.sqrt(n))
    if name == "linear":
        c = np.asarray(spec.get("coef", [1.0] * n), dtype=float)
        return (lambda x: float(c @ x), float(np.linalg.norm(c)), float(np.abs(c).sum() * radius))
    if name == "constant":
        c = float(spec.get("value", 0.0))
        return (lambda x: c, 0.0, abs(c))
    raise ValueError(f"unknown terminal cost {name!r}")


def builtin_dynamics(spec: dict, terminal: Optional[dict] = None) -> GameDynamics:
    """Named dynamics used by scenario files.

    ``frozen``           b = 0, sigma = 0
    ``constant-drift``   b = c, sigma = 0
    ``additive-noise``   b = 0, sigma = s * I
    ``separated``        b = u + v, sigma = s * I (s defaults to 1)
    ``geometric``        b = a x, sigma = s x (scalar)
    ``controlled-drift`` b = u, sigma = s * I
    ``matrix-game``      b = M[u, v] (scalar), sigma = s; u, v are row/column indices
    """
    name = spec["name"]
    n = int(spec.get("N", 1))
    s = float(spec.get("sigma", 0.0))
    g, g_lip, g_bound = _terminal(terminal or {"name": "quadratic"}, n)
    eye = np.eye(n)
    kw = dict(terminal_cost=g, N=n, d=n, cost_lip=g_lip, cost_bound=g_bound, name=name)

    if name == "frozen":
        zs = np.zeros((n, n))
        return GameDynamics(_zero_drift(n), lambda x, u, v: zs, lip_const=0.0, bound_const=0.0, **kw)
    if name == "constant-drift":
        c = np.broadcast_to(np.asarray(spec.get("drift", 1.0), dtype=float), (n,)).copy()
        zs = np.zeros((n, n))
        return GameDynamics(lambda x, u, v: c, lambda x, u, v: zs, lip_const=0.0,
                            bound_const=float(np.linalg.norm(c)), **kw)
    if name == "additive-noise":
        sig = s * eye
        return GameDynamics(_zero_drift(n), lambda x, u, v: sig, lip_const=0.0,
                            bound_const=abs(s) * np.sqrt(n), **kw)
    if name == "separated":
        sig = float(spec.get("sigma", 1.0)) * eye
        ubound = float(spec.get("control_bound", 1.0))
        return GameDynamics(lambda x, u, v: u + v, lambda x, u, v: sig, lip_const=0.0,
                            bound_const=max(2 * ubound * np.sqrt(n), float(np.linalg.norm(sig))), **kw)
    if name == "controlled-drift":
        sig = s * eye
        ubound = float(spec.get("control_bound", 1.0))
        return GameDynamics(lambda x, u, v: u, lambda x, u, v: sig, lip_const=0.0,
                            bound_const=max(ubound * np.sqrt(n), abs(s) * np.sqrt(n)), **kw)
    if name == "geometric":
        if n != 1:
            raise ValueError("geometric dynamics are scalar")
        a = float(spec.get("a", 0.0))
        radius = float((terminal or {}).get("radius", 4.0))
        return GameDynamics(lambda x, u, v: a * x, lambda x, u, v: (s * x).reshape(1, 1),
                            lip_const=max(abs(a), abs(s)), bound_const=max(abs(a), abs(s)) * radius, **kw)
    if name == "matrix-game":
        if n != 1:
            raise ValueError("matrix-game dynamics are scalar")
        M = np.asarray(spec.get("matrix", [[0.0, 1.0], [1.0, 0.0]]), dtype=float)
        sig = np.array([[s]])
        return GameDynamics(lambda x, u, v: np.array([M[int(u[0]), int(v[0])]]), lambda x, u, v: sig,
                            lip_const=0.0, bound_const=max(float(np.abs(M).max()), abs(s)), **kw)
    raise ValueError(f"unknown dynamics {name!r}")
