"""Upper and lower Hamiltonians over finite control grids.

Both are evaluated by exhaustive enumeration of the payoff matrix
``M[i, j] = 1/2 tr(sigma sigma^T A) + <b, xi>`` at ``(U[i], V[j])``:
``H+ = min_i max_j M`` and ``H- = max_j min_i M``. Ties go to the lowest
index. Because both values are entries of the same matrix, ``H+ >= H-``
holds exactly in floating point.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, List, Optional, Tuple

import numpy as np

from .dynamics import GameDynamics
from .path_space import ControlSet


@dataclass(frozen=True, eq=False)
class HamiltonianQuery:
    A: np.ndarray
    xi: np.ndarray
    x: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        xi = np.asarray(self.xi, dtype=float).reshape(-1)
        x = np.asarray(self.x, dtype=float).reshape(-1)
        if A.shape != (xi.size, xi.size) or x.size != xi.size:
            raise ValueError(f"inconsistent query shapes A{A.shape}, xi{xi.shape}, x{x.shape}")
        object.__setattr__(self, "A", 0.5 * (A + A.T))
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "x", x)


@dataclass(frozen=True)
class SaddleReport:
    h_plus: float
    h_minus: float
    arg_u_plus: int
    arg_v_minus: int

    @property
    def gap(self) -> float:
        return self.h_plus - self.h_minus


def payoff(dyn: GameDynamics, q: HamiltonianQuery, u, v) -> float:
    """``1/2 tr(sigma sigma^T A) + <b, xi>`` at state ``q.x``; ``q.t`` is unused."""
    if q.xi.size != dyn.N:
        raise ValueError(f"query dimension {q.xi.size} does not match N={dyn.N}")
    b, s = dyn.coefficients(q.x, np.atleast_1d(u), np.atleast_1d(v))
    return float(0.5 * np.sum((s @ s.T) * q.A) + b @ q.xi)


def payoff_matrix(dyn: GameDynamics, q: HamiltonianQuery, U: ControlSet, V: ControlSet) -> np.ndarray:
    if len(U) == 0 or len(V) == 0:
        raise ValueError("empty control set")
    if q.xi.size != dyn.N:
        raise ValueError(f"query dimension {q.xi.size} does not match N={dyn.N}")
    coefs = [dyn.coefficients(q.x, u, v) for u in U.points for v in V.points]
    b = np.array([c[0] for c in coefs])
    s = np.array([c[1] for c in coefs])
    a = np.einsum("pij,pkj->pik", s, s)
    M = 0.5 * (a * q.A).sum(axis=(1, 2)) + b @ q.xi
    return M.reshape(len(U), len(V))


def inf_sup(M: np.ndarray, axis_u: int = 0, axis_v: int = 1):
    """``min_u max_v`` along the given axes, returning (value, argmin_u)."""
    inner = M.max(axis=axis_v)
    au = axis_u if axis_u < axis_v else axis_u - 1
    return inner.min(axis=au), inner.argmin(axis=au)


def sup_inf(M: np.ndarray, axis_u: int = 0, axis_v: int = 1):
    """``max_v min_u`` along the given axes, returning (value, argmax_v)."""
    inner = M.min(axis=axis_u)
    av = axis_v if axis_v < axis_u else axis_v - 1
    return inner.max(axis=av), inner.argmax(axis=av)


def h_plus(dyn, q, U, V) -> Tuple[float, int]:
    val, arg = inf_sup(payoff_matrix(dyn, q, U, V))
    return float(val), int(arg)


def h_minus(dyn, q, U, V) -> Tuple[float, int]:
    val, arg = sup_inf(payoff_matrix(dyn, q, U, V))
    return float(val), int(arg)


def saddle(dyn, q, U, V) -> SaddleReport:
    M = payoff_matrix(dyn, q, U, V)
    hp, au = inf_sup(M)
    hm, av = sup_inf(M)
    return SaddleReport(float(hp), float(hm), int(au), int(av))


@dataclass
class IsaacsReport:
    max_gap: float
    min_gap: float
    worst_index: int
    n_queries: int
    tolerance: float
    holds: bool
    worst_query: Optional[dict] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def isaacs_gap(dyn, queries: List[HamiltonianQuery], U, V, tolerance: float = 1e-12) -> IsaacsReport:
    """Largest ``H+ - H-`` over the queries; Isaacs holds on the grid iff it is <= tolerance."""
    queries = list(queries)
    if not queries:
        raise ValueError("need at least one query")
    gaps = np.array([saddle(dyn, q, U, V).gap for q in queries])
    i = int(np.argmax(gaps))
    q = queries[i]
    worst = {"A": q.A.tolist(), "xi": q.xi.tolist(), "x": q.x.tolist(), "t": float(q.t)}
    return IsaacsReport(float(gaps[i]), float(gaps.min()), i, len(queries), tolerance,
                        bool(gaps[i] <= tolerance), worst)


def random_queries(N: int, n: int, seed: int, lo=-1.0, hi=1.0, scale: float = 1.0) -> List[HamiltonianQuery]:
    """Random queries with states uniform in ``[lo, hi]^N`` and Gaussian (A, xi)."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        B = rng.standard_normal((N, N)) * scale
        out.append(HamiltonianQuery(B + B.T, rng.standard_normal(N) * scale,
                                    rng.uniform(lo, hi, size=N), float(rng.uniform())))
    return out
