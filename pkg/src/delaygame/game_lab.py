"""Monte Carlo estimation of costs and game values, and dynamic-programming checks.

All estimators share noise across the strategies they compare (common
random numbers): path ``i`` always uses ``sample_brownian(grid, d, (seed, i))``.
Results therefore do not depend on evaluation order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .dynamics import GameDynamics, integrate
from .hamiltonian import saddle, HamiltonianQuery
from .hji_solver import ValueGrid
from .path_space import ControlSet, TimeGrid, sample_brownian
from .strategies import DelayedStrategy, fixed_point, make_feedback_strategy


def _mean_se(samples: np.ndarray):
    """Mean and standard error along the last axis; exact when the samples are all equal."""
    n = samples.shape[-1]
    mean = samples.mean(axis=-1)
    se = samples.std(axis=-1, ddof=1) / np.sqrt(n) if n > 1 else np.zeros_like(mean)
    flat = np.all(samples == samples[..., :1], axis=-1)
    mean = np.where(flat, samples[..., 0], mean)
    return mean, np.where(flat, 0.0, se)


@dataclass(frozen=True)
class McEstimate:
    mean: float
    std_error: float
    n_paths: int

    @classmethod
    def from_samples(cls, samples) -> "McEstimate":
        s = np.asarray(samples, dtype=float).ravel()
        if s.size == 0:
            raise ValueError("no samples")
        mean, se = _mean_se(s)
        return cls(float(mean), float(se), s.size)


def terminal_states(dyn: GameDynamics, x0, alpha: DelayedStrategy, beta: DelayedStrategy,
                    grid: TimeGrid, n_paths: int, seed: int) -> np.ndarray:
    """``X_T`` for each path under the fixed point of (alpha, beta); shape (n_paths, N)."""
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    out = np.empty((n_paths, dyn.N))
    for i in range(n_paths):
        w = sample_brownian(grid, dyn.d, (seed, i))
        pair = fixed_point(alpha, beta, w)
        out[i] = integrate(dyn, x0, pair.u, pair.v, w).terminal
    return out


def estimate_cost(dyn, x0, alpha, beta, grid, n_paths, seed) -> McEstimate:
    """Monte Carlo estimate of ``E[g(X_T)]`` under the strategy pair."""
    xs = terminal_states(dyn, x0, alpha, beta, grid, n_paths, seed)
    return McEstimate.from_samples([dyn.terminal_cost(x) for x in xs])


@dataclass
class MinimaxEstimate:
    """Restricted-family minimax of Monte Carlo costs.

    ``means[a, b]`` is the estimated payoff of ``alpha_family[a]`` against
    ``beta_family[b]``; ``estimate`` is the entry picked by the minimax and
    ``alpha_index``/``beta_index`` locate it.
    """

    estimate: McEstimate
    alpha_index: int
    beta_index: int
    means: np.ndarray
    std_errors: np.ndarray

    def as_dict(self):
        return {"mean": self.estimate.mean, "std_error": self.estimate.std_error,
                "n_paths": self.estimate.n_paths, "alpha_index": self.alpha_index,
                "beta_index": self.beta_index, "means": self.means.tolist()}


def payoff_samples(dyn, x0, grid, alpha_family, beta_family, n_paths, seed,
                   functional: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> np.ndarray:
    """Per-path payoffs, shape (len(alpha_family), len(beta_family), n_paths).

    ``functional`` maps an (n_paths, N) array of terminal states to payoffs;
    it defaults to the terminal cost.
    """
    if not alpha_family or not beta_family:
        raise ValueError("strategy families must be non-empty")
    if functional is None:
        functional = lambda xs: np.array([dyn.terminal_cost(x) for x in xs])
    out = np.empty((len(alpha_family), len(beta_family), n_paths))
    for a, alpha in enumerate(alpha_family):
        for b, beta in enumerate(beta_family):
            out[a, b] = functional(terminal_states(dyn, x0, alpha, beta, grid, n_paths, seed))
    return out


def _minimax(samples: np.ndarray, upper: bool) -> MinimaxEstimate:
    means, ses = _mean_se(samples)
    n = samples.shape[2]
    if upper:
        b_best = means.argmax(axis=1)
        a = int(np.argmin(means[np.arange(len(means)), b_best]))
        b = int(b_best[a])
    else:
        a_best = means.argmin(axis=0)
        b = int(np.argmax(means[a_best, np.arange(means.shape[1])]))
        a = int(a_best[b])
    return MinimaxEstimate(McEstimate(float(means[a, b]), float(ses[a, b]), n), a, b, means, ses)


def estimate_upper_value(dyn, x0, grid, alpha_family: Sequence[DelayedStrategy],
                         beta_family: Sequence[DelayedStrategy], n_paths: int, seed: int) -> MinimaxEstimate:
    """``min_alpha max_beta`` of estimated costs over the given families.

    Player II's family may hold open-loop delayed controls (strategies that
    ignore their opponent) as well as genuine strategies; for a fixed alpha
    every fixed point with any beta is itself a delayed control.
    """
    return _minimax(payoff_samples(dyn, x0, grid, alpha_family, beta_family, n_paths, seed), upper=True)


def estimate_lower_value(dyn, x0, grid, alpha_family, beta_family, n_paths, seed) -> MinimaxEstimate:
    """``max_beta min_alpha`` of estimated costs over the given families."""
    return _minimax(payoff_samples(dyn, x0, grid, alpha_family, beta_family, n_paths, seed), upper=False)


@dataclass
class DppReport:
    """One side of the dynamic programming check.

    ``kind="plus"``: ``V+(t0,x0) <= min_a max_b E[V+(t1, X_t1)]``;
    ``kind="minus"``: ``V-(t0,x0) >= max_b min_a E[V-(t1, X_t1)]``.
    ``margin`` is positive when the inequality holds strictly; the check
    passes when ``margin >= -tolerance``.
    """

    kind: str
    t0: float
    t1: float
    lhs: float
    rhs: float
    std_error: float
    scheme_tolerance: float
    tolerance: float
    margin: float
    holds: bool
    alpha_index: int
    beta_index: int

    def as_dict(self):
        return asdict(self)


def check_dpp(dyn, x0, grid: TimeGrid, vg: ValueGrid, alpha_family, beta_family, n_paths: int, seed: int,
              scheme_tolerance: float = 0.0) -> DppReport:
    """Sub (``vg.kind == "plus"``) or super (``"minus"``) dynamic programming check on ``[grid.t0, grid.T]``.

    ``grid`` is the strategies' grid from ``t0`` to ``t1``. Terminal states
    falling outside the value grid's box raise ``OutOfGrid``.
    """
    t0, t1 = grid.t0, grid.T
    lhs = float(vg.at(t0, np.asarray(x0, dtype=float)))
    samples = payoff_samples(dyn, x0, grid, alpha_family, beta_family, n_paths, seed,
                             functional=lambda xs: vg.at(t1, xs))
    upper = vg.kind == "plus"
    mm = _minimax(samples, upper=upper)
    rhs = mm.estimate.mean
    margin = rhs - lhs if upper else lhs - rhs
    tol = 3.0 * mm.estimate.std_error + scheme_tolerance
    return DppReport(vg.kind, t0, t1, lhs, rhs, mm.estimate.std_error, scheme_tolerance, tol, margin,
                     bool(margin >= -tol), mm.alpha_index, mm.beta_index)


def check_subdpp(dyn, x0, grid, vplus: ValueGrid, alpha_family, beta_family, n_paths, seed,
                 scheme_tolerance=0.0) -> DppReport:
    if vplus.kind != "plus":
        raise ValueError("the sub-DPP check needs the upper value grid")
    return check_dpp(dyn, x0, grid, vplus, alpha_family, beta_family, n_paths, seed, scheme_tolerance)


def check_superdpp(dyn, x0, grid, vminus: ValueGrid, alpha_family, beta_family, n_paths, seed,
                   scheme_tolerance=0.0) -> DppReport:
    if vminus.kind != "minus":
        raise ValueError("the super-DPP check needs the lower value grid")
    return check_dpp(dyn, x0, grid, vminus, alpha_family, beta_family, n_paths, seed, scheme_tolerance)


# -- policies read off a value grid --------------------------------------------

def hji_policy(vg: ValueGrid, dyn: GameDynamics, U: ControlSet, V: ControlSet, side: str):
    """Markov policy ``(t, x) -> index`` from the saddle of the Hamiltonian at (D^2V, DV).

    Player I takes the minimizer of the upper Hamiltonian, Player II the
    maximizer of the lower one. States outside the box are clipped onto it
    for the purpose of choosing a control.
    """
    sp = vg.space

    def policy(t, x):
        x = np.clip(np.asarray(x, dtype=float), sp.lo, sp.hi)
        t = min(max(t, vg.times[0]), vg.times[-1])
        p, A = vg.derivatives_at(t, x)
        rep = saddle(dyn, HamiltonianQuery(A, p, x, t), U, V)
        return rep.arg_u_plus if side == "I" else rep.arg_v_minus

    return policy


def hji_feedback_strategy(vg, dyn, x0, grid, U, V, side, delay_steps=None) -> DelayedStrategy:
    own, opp = (U, V) if side == "I" else (V, U)
    D = grid.delay_steps if delay_steps is None else delay_steps
    return make_feedback_strategy(dyn, x0, hji_policy(vg, dyn, U, V, side), side, D, grid, own, opp)


# -- regularity of the cost ----------------------------------------------------------

@dataclass
class CostLipschitz:
    ratio: float
    std_error: float
    bound: float
    holds: bool


def cost_lipschitz(dyn, x0, h, alpha, beta, grid, n_paths, seed) -> CostLipschitz:
    """``|J(x0 + h) - J(x0)| / |h|`` with common noise for one strategy pair.

    The bound is ``L_g * exp(L_f * (T - t0))`` from the declared constants;
    the check allows three paired standard errors on top.
    """
    x0 = np.asarray(x0, dtype=float)
    h = np.broadcast_to(np.asarray(h, dtype=float), x0.shape)
    xa = terminal_states(dyn, x0, alpha, beta, grid, n_paths, seed)
    xb = terminal_states(dyn, x0 + h, alpha, beta, grid, n_paths, seed)
    diff = np.array([dyn.terminal_cost(b) - dyn.terminal_cost(a) for a, b in zip(xa, xb)])
    norm = float(np.linalg.norm(h))
    est = McEstimate.from_samples(diff)
    ratio = abs(est.mean) / norm
    se = est.std_error / norm
    bound = dyn.cost_lip * np.exp(dyn.lip_const * (grid.T - grid.t0))
    return CostLipschitz(ratio, se, float(bound), bool(ratio <= bound + 3 * se))
