"""Acceptance suite: one printed PASS/FAIL line per criterion (criterion 4 has four sub-lines)."""

import json

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from delaygame.dynamics import GameDynamics, builtin_dynamics, integrate, pathwise_map
from delaygame.game_lab import estimate_cost
from delaygame.hamiltonian import HamiltonianQuery, h_minus, h_plus, isaacs_gap, random_queries
from delaygame.hji_solver import SpaceGrid, choose_time_grid, solve
from delaygame.path_space import ControlPath, ControlSet, TimeGrid, discretize_interval, sample_brownian
from delaygame.scenario import bundled_scenarios, run_scenario
from delaygame.strategies import apply_strategy, constant_strategy, fixed_point, table_strategy

U = discretize_interval(-1, 1, 3)
V = discretize_interval(-1, 1, 5)
ZERO = discretize_interval(0, 0, 1)


def report(label, ok, detail):
    line = f"criterion {label}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


@pytest.fixture(scope="module")
def bundled_runs(tmp_path_factory):
    """Every bundled scenario run twice with its own seed into separate directories."""
    root = tmp_path_factory.mktemp("bundled")
    out = {}
    for name in bundled_scenarios():
        dirs = [root / name / "a", root / name / "b"]
        for d in dirs:
            run_scenario(name, out_dir=d)
        out[name] = dirs
    return out


def summary(dirs):
    return json.loads((dirs[0] / "summary.json").read_text())


def check_named(summ, prefix):
    return [c for c in summ["checks"] if c["name"].startswith(prefix)]


def test_criterion_1_fixed_point_replay():
    rng = np.random.default_rng(101)
    n, bad = 120, 0
    for trial in range(n):
        D = int(rng.choice([1, 2, 4]))
        steps = D * int(rng.integers(1, 32 // D + 1))
        grid = TimeGrid(0.0, float(rng.uniform(0.2, 2.0)), steps, D)
        w = sample_brownian(grid, int(rng.integers(1, 3)), (101, trial))
        a = table_strategy("I", U, int(rng.integers(2 ** 31)), D)
        b = table_strategy("II", V, int(rng.integers(2 ** 31)), D)
        p = fixed_point(a, b, w)
        q = fixed_point(a, b, w, order="II-first")
        ok = (np.array_equal(apply_strategy(a, w, p.v).values, p.u.values)
              and np.array_equal(apply_strategy(b, w, p.u).values, p.v.values)
              and np.array_equal(p.u.values, q.u.values) and np.array_equal(p.v.values, q.v.values))
        bad += not ok
    assert report(1, bad == 0, f"{n - bad}/{n} random scenarios replay bit-exactly in both orders")


def test_criterion_2_pathwise_map_nonanticipative():
    rng = np.random.default_rng(202)
    dyns = [builtin_dynamics({"name": "separated", "sigma": 0.5}),
            builtin_dynamics({"name": "geometric", "a": 0.3, "sigma": 0.4}),
            builtin_dynamics({"name": "additive-noise", "sigma": 1.0})]
    n, bad = 150, 0
    for trial in range(n):
        D = int(rng.choice([1, 2, 4]))
        steps = D * int(rng.integers(1, 32 // D + 1))
        grid = TimeGrid(0.0, 1.0, steps, D)
        dyn = dyns[trial % len(dyns)]
        k = int(rng.integers(0, steps + 1))
        w = sample_brownian(grid, 1, (202, trial))
        v = ControlPath(grid, rng.integers(len(U), size=steps), U)
        w2 = w.with_suffix(k, rng.standard_normal((steps - k, 1)))
        vv = np.array(v.values)
        vv[k:] = rng.integers(len(U), size=steps - k)
        strat = table_strategy("II", U, trial, D)
        x0 = [float(rng.uniform(0.5, 1.5))]
        a = pathwise_map(dyn, x0, strat, v, w).states
        b = pathwise_map(dyn, x0, strat, ControlPath(grid, vv, U), w2).states
        bad += not np.array_equal(a[:k + 1], b[:k + 1])
    assert report(2, bad == 0, f"{n - bad}/{n} suffix perturbations leave the prefix bit-identical")


def _random_dynamics(rng):
    W = rng.standard_normal((4, 2, 2))
    return GameDynamics(
        lambda x, u, v: np.array([np.sin(W[0, 0, 0] * x[0] + u[0] * v[0]), W[0, 1, 1] * u[0] - W[1, 0, 1] * v[0] ** 2]),
        lambda x, u, v: W[2] + W[3] * np.tanh(u[0] - v[0] + x[1]),
        lambda x: 0.0, 2, 2)


def test_criterion_3_weak_duality():
    rng = np.random.default_rng(303)
    n_dyn, per = 20, 500
    worst = np.inf
    for i in range(n_dyn):
        rep = isaacs_gap(_random_dynamics(rng), random_queries(2, per, seed=(303, i)), U, V)
        worst = min(worst, rep.min_gap)
    game = builtin_dynamics({"name": "matrix-game", "matrix": [[0, 1], [1, 0]]})
    idx = ControlSet(np.array([[0.0], [1.0]]))
    q = HamiltonianQuery([[0.0]], [1.0], [0.0])
    hp, hm = h_plus(game, q, idx, idx)[0], h_minus(game, q, idx, idx)[0]
    ok = worst >= -1e-12 and hp == 1.0 and hm == 0.0
    assert report(3, ok, f"min(H+ - H-) = {worst:.3g} over {n_dyn * per} queries; matrix game H+={hp}, H-={hm}")


HEAT = builtin_dynamics({"name": "additive-noise", "sigma": np.sqrt(2.0)}, {"name": "quadratic", "radius": 4})
EIKONAL = builtin_dynamics({"name": "controlled-drift", "sigma": 0.0}, {"name": "abs", "radius": 3})
U21 = discretize_interval(-1, 1, 21)
T_ORACLE = 0.5


def _oracle_error(dyn, lo, hi, dx, Uc, exact, scheme):
    sp = SpaceGrid.from_spacing(lo, hi, dx)
    vg = solve(dyn, sp, choose_time_grid(dyn, sp, Uc, ZERO, 0.0, T_ORACLE), "plus", Uc, ZERO, scheme=scheme)
    x = sp.axes[0]
    m = np.abs(x) <= 2.0
    return max(np.abs(lev[m] - exact(x[m], T_ORACLE - t)).max() for t, lev in zip(vg.times, vg.values))


@pytest.fixture(scope="module")
def oracle_errors():
    heat = [_oracle_error(HEAT, -4, 4, dx, ZERO, lambda x, tau: x ** 2 + 2 * tau, "lax-friedrichs")
            for dx in (0.05, 0.025)]
    eik = [_oracle_error(EIKONAL, -3, 3, dx, U21, lambda x, tau: np.maximum(np.abs(x) - tau, 0.0), "upwind")
           for dx in (0.05, 0.025)]
    return heat, eik


def test_criterion_4a_heat_oracle(oracle_errors):
    err = oracle_errors[0][0]
    assert report("4a", err <= 0.05, f"heat max interior error {err:.4g} <= 0.05 at dx=0.05")


def test_criterion_4b_eikonal_oracle(oracle_errors):
    err = oracle_errors[1][0]
    assert report("4b", err <= 0.05, f"eikonal max interior error {err:.4g} <= 0.05 at dx=0.05")


def test_criterion_4c_heat_error_drops_with_dx(oracle_errors):
    coarse, fine = oracle_errors[0]
    assert report("4c", fine < coarse, f"heat error {coarse:.6g} (dx=0.05) -> {fine:.6g} (dx=0.025)")


def test_criterion_4d_eikonal_error_drops_with_dx(oracle_errors):
    coarse, fine = oracle_errors[1]
    assert report("4d", fine < coarse, f"eikonal error {coarse:.6g} (dx=0.05) -> {fine:.6g} (dx=0.025)")


def test_criterion_5_ordering_and_isaacs(bundled_runs):
    failures = []
    for name, dirs in bundled_runs.items():
        s = summary(dirs)
        for c in check_named(s, "hji.ordering") + check_named(s, "hji.isaacs_bit_identical"):
            if not c["passed"]:
                failures.append(f"{name}:{c['name']}")
        if not check_named(s, "hji.ordering"):
            failures.append(f"{name}: no ordering check")
    sep = summary(bundled_runs["separated"])
    identical = [c["passed"] for c in check_named(sep, "hji.isaacs_bit_identical")] == [True]
    ok = not failures and identical
    detail = f"V- <= V+ on {len(bundled_runs)} scenarios, separated sweeps bit-identical={identical}"
    assert report(5, ok, detail + (f"; failed {failures}" if failures else ""))


def test_criterion_6_monte_carlo_oracle():
    grid = TimeGrid(0.0, 1.0, 8)
    dyn = builtin_dynamics({"name": "additive-noise", "sigma": 1.0}, {"name": "quadratic"})
    x0 = 0.7
    est = estimate_cost(dyn, [x0], constant_strategy("I", ZERO, 0), constant_strategy("II", ZERO, 0), grid,
                        10_000, 606)
    frozen = builtin_dynamics({"name": "frozen"}, {"name": "quadratic"})
    fz = estimate_cost(frozen, [x0], table_strategy("I", U, 1), table_strategy("II", V, 2), grid, 100, 606)
    ok = abs(est.mean - (x0 ** 2 + 1)) <= 3 * est.std_error and fz.mean == x0 ** 2 and fz.std_error == 0.0
    assert report(6, ok, f"mean {est.mean:.4f} vs {x0 ** 2 + 1:.4f} (3SE={3 * est.std_error:.4f}); "
                         f"frozen {fz.mean} with SE {fz.std_error}")


def test_criterion_7_dpp(bundled_runs):
    heat = summary(bundled_runs["heat"])
    sep = summary(bundled_runs["separated"])
    eq = check_named(heat, "dpp.")
    one_sided = check_named(sep, "dpp.")
    margins = {k: sep["reports"]["dpp"][k]["margin"] for k in ("plus", "minus")}
    tols = {k: sep["reports"]["dpp"][k]["tolerance"] for k in ("plus", "minus")}
    ok = (len(eq) == 4 and all(c["passed"] for c in eq)
          and len(one_sided) == 2 and all(c["passed"] for c in one_sided))
    assert report(7, ok, f"heat equality checks {[c['passed'] for c in eq]}; separated margins {margins} "
                         f"vs tolerances {tols}")


def test_criterion_8_regularity(bundled_runs):
    failures, ratios = [], {}
    for name, dirs in bundled_runs.items():
        s = summary(dirs)
        checks = check_named(s, "regularity.")
        if not checks:
            failures.append(f"{name}: no regularity checks")
        failures += [f"{name}:{c['name']}" for c in checks if not c["passed"]]
        reg = s["reports"].get("regularity", {})
        ratios[name] = [round(reg[k]["holder_ratio"], 3) for k in ("plus", "minus") if k in reg]
    assert report(8, not failures, f"Lipschitz bounds and Hoelder ratios {ratios}"
                                   + (f"; failed {failures}" if failures else ""))


def test_criterion_9_determinism(bundled_runs):
    differ = [name for name, (a, b) in bundled_runs.items()
              if (a / "summary.json").read_bytes() != (b / "summary.json").read_bytes()]
    assert report(9, not differ, f"{len(bundled_runs) - len(differ)}/{len(bundled_runs)} bundled scenarios give "
                                 "byte-identical summary.json")
