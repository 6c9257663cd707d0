import numpy as np
import pytest

from delaygame.dynamics import (DeclaredConstantError, GameDynamics, NonFiniteState, builtin_dynamics,
                                integrate, pathwise_map, probe_constants)
from delaygame.path_space import ControlPath, TimeGrid, discretize_interval, sample_brownian
from delaygame.strategies import DelayViolation, DelayedStrategy, constant_strategy, table_strategy

U = discretize_interval(-1, 1, 3)


def scalar(drift, diffusion, g=lambda x: float(x[0] ** 2)):
    return GameDynamics(lambda x, u, v: np.atleast_1d(drift(x, u, v)),
                        lambda x, u, v: np.atleast_2d(diffusion(x, u, v)), g, 1, 1)


def const_paths(grid, i=1):
    return ControlPath.constant(grid, U, i), ControlPath.constant(grid, U, i)


def test_frozen_dynamics_stay_put():
    g = TimeGrid(0, 1, 10)
    dyn = builtin_dynamics({"name": "frozen"})
    u, v = const_paths(g)
    sp = integrate(dyn, [1.0], u, v, sample_brownian(g, 1, 0))
    assert np.all(sp.states == 1.0)


def test_constant_drift_is_exact():
    g = TimeGrid(0, 1, 8)
    dyn = builtin_dynamics({"name": "constant-drift", "drift": 1.0})
    sp = integrate(dyn, [0.0], *const_paths(g), sample_brownian(g, 1, 0))
    assert sp.terminal[0] == 1.0


def test_pure_noise_sums_increments():
    g = TimeGrid(0, 1, 16)
    dyn = builtin_dynamics({"name": "additive-noise", "sigma": 1.0})
    w = sample_brownian(g, 1, 4)
    sp = integrate(dyn, [0.3], *const_paths(g), w)
    expected = 0.3 + np.concatenate([[0.0], np.cumsum(w.increments[:, 0])])
    assert np.allclose(sp.states[:, 0], expected, rtol=0, atol=1e-14)


def test_geometric_mean_matches_exponential_growth():
    a, s, x0, n_paths = 0.2, 0.3, 1.0, 10_000
    g = TimeGrid(0, 1, 25)
    dyn = builtin_dynamics({"name": "geometric", "a": a, "sigma": s})
    u, v = const_paths(g)
    xt = np.array([integrate(dyn, [x0], u, v, sample_brownian(g, 1, (2, i))).terminal[0]
                   for i in range(n_paths)])
    se = xt.std(ddof=1) / np.sqrt(n_paths)
    assert abs(xt.mean() - x0 * np.exp(a)) <= 3 * se


def test_strong_error_halves_like_sqrt_dt():
    dyn = builtin_dynamics({"name": "geometric", "a": 0.2, "sigma": 0.5})
    levels = [8, 16, 32, 64]
    n_paths = 1000
    diffs = np.zeros((len(levels), n_paths))
    for i in range(n_paths):
        w = sample_brownian(TimeGrid(0, 1, levels[0]), 1, (3, i))
        prev = None
        for j in range(len(levels) + 1):
            grid = w.grid
            u, v = ControlPath.constant(grid, U, 1), ControlPath.constant(grid, U, 1)
            xt = integrate(dyn, [1.0], u, v, w).terminal[0]
            if prev is not None:
                diffs[j - 1, i] = xt - prev
            prev = xt
            w = w.refine((3, i, j))
    rms = np.sqrt((diffs ** 2).mean(axis=1))
    slope = np.polyfit(np.log(1.0 / np.array(levels)), np.log(rms), 1)[0]
    assert 0.3 <= slope <= 0.7


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_state_aborts():
    g = TimeGrid(0, 1, 50)
    dyn = scalar(lambda x, u, v: x * 1e200, lambda x, u, v: 0.0)
    with pytest.raises(NonFiniteState) as err:
        integrate(dyn, [1e200], *const_paths(g), sample_brownian(g, 1, 0))
    assert err.value.step >= 1


def test_dimension_checks():
    g = TimeGrid(0, 1, 4)
    dyn = builtin_dynamics({"name": "frozen"})
    with pytest.raises(ValueError):
        integrate(dyn, [0.0, 1.0], *const_paths(g), sample_brownian(g, 1, 0))
    with pytest.raises(ValueError):
        integrate(dyn, [0.0], *const_paths(g), sample_brownian(g, 2, 0))


def test_probe_constants_accepts_builtins_and_catches_lies():
    for spec in ({"name": "separated", "sigma": 0.1}, {"name": "geometric", "a": 0.2, "sigma": 0.3},
                 {"name": "additive-noise", "sigma": 1.0}):
        probe_constants(builtin_dynamics(spec, {"name": "quadratic", "radius": 4}), U, U, -4, 4)
    liar = GameDynamics(lambda x, u, v: 3 * x, lambda x, u, v: np.zeros((1, 1)), lambda x: 0.0, 1, 1,
                        lip_const=1.0, bound_const=100.0)
    with pytest.raises(DeclaredConstantError):
        probe_constants(liar, U, U, -1, 1)
    loud = GameDynamics(lambda x, u, v: np.array([5.0]), lambda x, u, v: np.zeros((1, 1)), lambda x: 0.0, 1, 1,
                        lip_const=0.0, bound_const=1.0)
    with pytest.raises(DeclaredConstantError):
        probe_constants(loud, U, U, -1, 1)


def test_pathwise_map_frozen_and_constant_reduction():
    g = TimeGrid(0, 1, 8, 2)
    w = sample_brownian(g, 1, 1)
    v = ControlPath(g, np.array([0, 1, 2, 0, 1, 2, 0, 1]), U)
    frozen = builtin_dynamics({"name": "frozen"})
    assert np.all(pathwise_map(frozen, [0.7], table_strategy("I", U, 3, 2), v, w).states == 0.7)
    dyn = builtin_dynamics({"name": "separated", "sigma": 0.4})
    out = pathwise_map(dyn, [0.2], constant_strategy("I", U, 2, 2), v, w)
    ref = integrate(dyn, [0.2], ControlPath.constant(g, U, 2), v, w)
    assert np.array_equal(out.states, ref.states)


def test_pathwise_map_nonanticipative_under_suffix_perturbation():
    rng = np.random.default_rng(0)
    dyn = builtin_dynamics({"name": "separated", "sigma": 0.5})
    for trial in range(30):
        D = int(rng.choice([1, 2, 4]))
        g = TimeGrid(0, 1, 16, D)
        k = int(rng.integers(0, 17))
        w = sample_brownian(g, 1, (8, trial))
        v = ControlPath(g, rng.integers(3, size=16), U)
        w2 = w.with_suffix(k, rng.standard_normal((16 - k, 1)))
        vv = np.array(v.values)
        vv[k:] = rng.integers(3, size=16 - k)
        v2 = ControlPath(g, vv, U)
        strat = table_strategy("II", U, trial, D)
        a = pathwise_map(dyn, [0.0], strat, v, w).states
        b = pathwise_map(dyn, [0.0], strat, v2, w2).states
        assert np.array_equal(a[:k + 1], b[:k + 1])


def test_pathwise_map_traps_anticipation():
    g = TimeGrid(0, 1, 4, 1)

    def peek(noise, opp, k):
        return np.array([int(opp[k])])

    bad = DelayedStrategy("I", 1, peek, U, "peek")
    with pytest.raises(DelayViolation):
        pathwise_map(builtin_dynamics({"name": "frozen"}), [0.0], bad, ControlPath.constant(g, U, 0),
                     sample_brownian(g, 1, 0))


def test_builtin_terminal_costs_and_unknown_names():
    dyn = builtin_dynamics({"name": "frozen", "N": 2}, {"name": "abs"})
    assert dyn.terminal_cost(np.array([3.0, 4.0])) == 5.0
    with pytest.raises(ValueError):
        builtin_dynamics({"name": "nope"})
    with pytest.raises(ValueError):
        builtin_dynamics({"name": "frozen"}, {"name": "nope"})
