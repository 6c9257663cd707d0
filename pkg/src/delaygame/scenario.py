"""Scenario files and the staged runner behind the CLI.

A scenario is a JSON document (``"schema": 1``) describing the dynamics,
control grids, strategy families and numerical parameters. See
``docs/scenario-schema.md`` for the field reference. Bundled scenarios live
in ``delaygame/scenarios`` and can be referred to by name.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import game_lab, hamiltonian, hji_solver
from .dynamics import GameDynamics, builtin_dynamics, integrate, probe_constants
from .path_space import ControlSet, TimeGrid, discretize_interval, sample_brownian
from .strategies import (DelayedStrategy, apply_strategy, constant_strategy, copy_lagged_strategy,
                         fixed_point, table_strategy)

log = logging.getLogger(__name__)

STAGES = ("simulate", "fixpoint", "solve-hji", "check-isaacs", "check-dpp", "regularity")


class ScenarioError(ValueError):
    """Invalid scenario; the message names the offending field path."""


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TimeSpec(_Model):
    t0: float = 0.0
    T: float
    n_steps: int = Field(gt=0)
    delay_steps: int = Field(default=1, gt=0)


class ControlSpec(_Model):
    lo: Optional[float] = None
    hi: Optional[float] = None
    m: Optional[int] = Field(default=None, gt=0)
    points: Optional[List[List[float]]] = None

    @model_validator(mode="after")
    def _one_form(self):
        if self.points is None and None in (self.lo, self.hi, self.m):
            raise ValueError("give either points or all of lo, hi, m")
        return self

    def build(self) -> ControlSet:
        if self.points is not None:
            return ControlSet(np.asarray(self.points, dtype=float))
        return discretize_interval(self.lo, self.hi, self.m)


class Controls(_Model):
    U: ControlSpec
    V: ControlSpec


class StrategySpec(_Model):
    kind: Literal["constant", "copy-lagged", "table", "feedback"]
    index: int = 0
    seed: int = 0
    value: Literal["plus", "minus"] = "plus"
    delay_steps: Optional[int] = Field(default=None, gt=0)


class Strategies(_Model):
    I: List[StrategySpec] = Field(min_length=1)
    II: List[StrategySpec] = Field(min_length=1)


class MonteCarlo(_Model):
    n_paths: int = Field(default=1000, ge=1)
    seed: int = 0


class Region(_Model):
    lo: List[float]
    hi: List[float]


class HjiSpec(_Model):
    lo: List[float]
    hi: List[float]
    dx: float = Field(gt=0)
    c_cfl: float = Field(default=0.5, gt=0, le=0.5)
    scheme: Literal["lax-friedrichs", "upwind"] = "lax-friedrichs"
    region: Optional[Region] = None
    store_every: int = Field(default=1, ge=1)
    ordering_tolerance: float = Field(default=1e-9, ge=0)


class Oracle(_Model):
    name: Literal["terminal", "heat", "eikonal"]
    tolerance: float = Field(gt=0)


class Checks(_Model):
    dpp_t1: Optional[float] = None
    dpp_equality: bool = False
    isaacs_queries: int = Field(default=200, ge=1)
    isaacs_expected: Optional[bool] = None
    oracle: Optional[Oracle] = None
    regularity_h: float = Field(default=0.05, gt=0)
    fixpoint_paths: int = Field(default=4, ge=1)
    compare_upper_to_hji: bool = False


class Scenario(_Model):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    schema_version: Literal[1] = Field(alias="schema")
    name: str
    dynamics: Dict[str, Any]
    terminal_cost: Dict[str, Any] = Field(default_factory=lambda: {"name": "quadratic"})
    x0: List[float]
    time: TimeSpec
    controls: Controls
    strategies: Strategies
    monte_carlo: MonteCarlo = Field(default_factory=MonteCarlo)
    hji: Optional[HjiSpec] = None
    checks: Checks = Field(default_factory=Checks)
    stages: List[Literal[STAGES]] = Field(default_factory=lambda: list(STAGES))

    @field_validator("dynamics")
    @classmethod
    def _named(cls, v):
        if "name" not in v:
            raise ValueError("dynamics needs a 'name'")
        return v


def _format_validation(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def bundled_scenarios() -> List[str]:
    root = resources.files("delaygame") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def resolve_path(path) -> Path:
    p = Path(path)
    if p.exists():
        return p
    name = p.name[:-5] if p.name.endswith(".json") else p.name
    if p.parent == Path(".") and name in bundled_scenarios():
        return Path(str(resources.files("delaygame") / "scenarios" / f"{name}.json"))
    raise FileNotFoundError(f"no scenario file {path}")


def load_scenario(path) -> Scenario:
    p = resolve_path(path)
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{p}: not valid JSON ({exc})") from None
    return parse_scenario(raw)


def parse_scenario(raw: dict) -> Scenario:
    try:
        sc = Scenario.model_validate(raw)
    except ValidationError as exc:
        raise ScenarioError(_format_validation(exc)) from None
    _cross_check(sc)
    return sc


def _cross_check(sc: Scenario) -> None:
    n = int(sc.dynamics.get("N", 1))
    if len(sc.x0) != n:
        raise ScenarioError(f"x0: has {len(sc.x0)} components, dynamics.N is {n}")
    try:
        grid = TimeGrid(sc.time.t0, sc.time.T, sc.time.n_steps, sc.time.delay_steps)
    except ValueError as exc:
        raise ScenarioError(f"time: {exc}") from None
    for side, specs, cs in (("I", sc.strategies.I, sc.controls.U), ("II", sc.strategies.II, sc.controls.V)):
        size = len(cs.points) if cs.points is not None else cs.m
        for i, s in enumerate(specs):
            D = s.delay_steps or grid.delay_steps
            if grid.n_steps % D:
                raise ScenarioError(f"strategies.{side}.{i}.delay_steps: {D} does not divide time.n_steps")
            if s.kind in ("constant", "copy-lagged") and not 0 <= s.index < size:
                raise ScenarioError(f"strategies.{side}.{i}.index: {s.index} outside the control set")
            if s.kind == "feedback" and sc.hji is None:
                raise ScenarioError(f"strategies.{side}.{i}.kind: feedback strategies need an 'hji' section")
    if sc.hji is not None:
        if len(sc.hji.lo) != n or len(sc.hji.hi) != n:
            raise ScenarioError(f"hji.lo/hji.hi: need {n} entries")
        if n > 2:
            raise ScenarioError("dynamics.N: the grid solver supports N <= 2")
    if sc.checks.compare_upper_to_hji and sc.hji is None:
        raise ScenarioError("checks.compare_upper_to_hji: needs an 'hji' section")
    if sc.checks.dpp_t1 is not None:
        t1 = sc.checks.dpp_t1
        frac = (t1 - sc.time.t0) / (sc.time.T - sc.time.t0) * sc.time.n_steps
        if not (sc.time.t0 < t1 <= sc.time.T) or abs(frac - round(frac)) > 1e-9 or round(frac) % sc.time.delay_steps:
            raise ScenarioError("checks.dpp_t1: must be a block-aligned time of the strategy grid in (t0, T]")
    check_stages(sc, sc.stages)


def check_stages(sc: Scenario, stages) -> None:
    for st in stages:
        if st not in STAGES:
            raise ScenarioError(f"stages: unknown stage {st!r}")
        if st in ("check-dpp", "regularity", "solve-hji") and sc.hji is None:
            raise ScenarioError(f"stages: '{st}' needs an 'hji' section")
        if st == "check-dpp" and sc.checks.dpp_t1 is None:
            raise ScenarioError("checks.dpp_t1: required by the 'check-dpp' stage")


# -- runner ---------------------------------------------------------------------

@dataclass
class Check:
    name: str
    passed: bool
    value: Any = None
    tolerance: Any = None

    def as_dict(self):
        return {"name": self.name, "passed": bool(self.passed), "value": _plain(self.value),
                "tolerance": _plain(self.tolerance)}


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


class ScenarioRun:
    """Builds the objects of a scenario and runs its stages."""

    def __init__(self, sc: Scenario, seed: Optional[int] = None, n_paths: Optional[int] = None,
                 out_dir: Optional[Path] = None):
        self.sc = sc
        self.seed = sc.monte_carlo.seed if seed is None else int(seed)
        self.n_paths = sc.monte_carlo.n_paths if n_paths is None else int(n_paths)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.U = sc.controls.U.build()
        self.V = sc.controls.V.build()
        self.dyn = builtin_dynamics(sc.dynamics, sc.terminal_cost)
        self.x0 = np.asarray(sc.x0, dtype=float)
        self.grid = TimeGrid(sc.time.t0, sc.time.T, sc.time.n_steps, sc.time.delay_steps)
        self.checks: List[Check] = []
        self.reports: Dict[str, Any] = {}
        self.artifacts: List[str] = []
        self._values: Dict[str, hji_solver.ValueGrid] = {}
        self._coarse: Dict[str, hji_solver.ValueGrid] = {}
        if sc.hji is not None:
            probe_constants(self.dyn, self.U, self.V, sc.hji.lo, sc.hji.hi, seed=self.seed)

    # helpers

    def _check(self, name, passed, value=None, tolerance=None):
        self.checks.append(Check(name, bool(passed), value, tolerance))
        log.debug("%-34s %s", name, "pass" if passed else "FAIL")

    def _out(self, name) -> Optional[Path]:
        if self.out_dir is None:
            return None
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.artifacts.append(name)
        return self.out_dir / name

    @property
    def space(self) -> hji_solver.SpaceGrid:
        h = self.sc.hji
        return hji_solver.SpaceGrid.from_spacing(h.lo, h.hi, h.dx)

    @property
    def region(self):
        r = self.sc.hji.region
        return None if r is None else (r.lo, r.hi)

    def _solve(self, space, kind):
        h = self.sc.hji
        tg = hji_solver.choose_time_grid(self.dyn, space, self.U, self.V, self.grid.t0, self.grid.T, h.c_cfl)
        return hji_solver.solve(self.dyn, space, tg, kind, self.U, self.V, h.c_cfl, h.store_every, h.scheme)

    def value(self, kind: str) -> hji_solver.ValueGrid:
        if kind not in self._values:
            self._values[kind] = self._solve(self.space, kind)
        return self._values[kind]

    def coarse_value(self, kind: str) -> hji_solver.ValueGrid:
        if kind not in self._coarse:
            self._coarse[kind] = self._solve(self.space.coarsened(), kind)
        return self._coarse[kind]

    def scheme_tolerance(self, kind: str, times) -> float:
        """Twice the fine/coarse discrepancy, an a-posteriori bound for a first-order scheme."""
        return 2.0 * hji_solver.scheme_error_estimate(self.value(kind), self.coarse_value(kind), times, self.region)

    def family(self, side: str, grid: TimeGrid, x0=None) -> List[DelayedStrategy]:
        specs = self.sc.strategies.I if side == "I" else self.sc.strategies.II
        own, opp = (self.U, self.V) if side == "I" else (self.V, self.U)
        x0 = self.x0 if x0 is None else x0
        out = []
        for s in specs:
            D = s.delay_steps or grid.delay_steps
            if s.kind == "constant":
                out.append(constant_strategy(side, own, s.index, D))
            elif s.kind == "copy-lagged":
                out.append(copy_lagged_strategy(side, own, opp, s.index, D))
            elif s.kind == "table":
                out.append(table_strategy(side, own, s.seed, D))
            else:
                out.append(game_lab.hji_feedback_strategy(self.value(s.value), self.dyn, x0, grid,
                                                          self.U, self.V, side, D))
        return out

    # stages

    def stage_simulate(self):
        alphas, betas = self.family("I", self.grid), self.family("II", self.grid)
        w = sample_brownian(self.grid, self.dyn.d, (self.seed, 0))
        pair = fixed_point(alphas[0], betas[0], w)
        sp = integrate(self.dyn, self.x0, pair.u, pair.v, w)
        if (p := self._out("noise_path.csv")) is not None:
            w.to_csv(p)
        if (p := self._out("state_path.csv")) is not None:
            sp.to_csv(p)
        cost = game_lab.estimate_cost(self.dyn, self.x0, alphas[0], betas[0], self.grid, self.n_paths, self.seed)
        self.reports["cost"] = {"mean": cost.mean, "std_error": cost.std_error, "n_paths": cost.n_paths}
        self._check("simulate.finite", math.isfinite(cost.mean), cost.mean)
        samples = game_lab.payoff_samples(self.dyn, self.x0, self.grid, alphas, betas, self.n_paths, self.seed)
        upper = game_lab._minimax(samples, upper=True)
        lower = game_lab._minimax(samples, upper=False)
        self.reports["upper_value"] = upper.as_dict()
        self.reports["lower_value"] = lower.as_dict()
        slack = 3 * (upper.estimate.std_error + lower.estimate.std_error)
        self._check("values.ordering", lower.estimate.mean <= upper.estimate.mean + slack,
                    upper.estimate.mean - lower.estimate.mean, slack)
        if self.sc.checks.compare_upper_to_hji:
            vp = float(self.value("plus").at(self.grid.t0, self.x0))
            tol = 3 * upper.estimate.std_error + self.scheme_tolerance("plus", [self.grid.t0])
            self.reports["upper_value"]["hji"] = vp
            self._check("values.upper_vs_hji", abs(upper.estimate.mean - vp) <= tol,
                        upper.estimate.mean - vp, tol)

    def stage_fixpoint(self):
        alphas, betas = self.family("I", self.grid), self.family("II", self.grid)
        ok = True
        for i in range(self.sc.checks.fixpoint_paths):
            w = sample_brownian(self.grid, self.dyn.d, (self.seed, i))
            for a in alphas:
                for b in betas:
                    pair = fixed_point(a, b, w)
                    other = fixed_point(a, b, w, order="II-first")
                    D = pair.delay_steps
                    replay_u = apply_strategy(a.reblock(D), w, pair.v)
                    replay_v = apply_strategy(b.reblock(D), w, pair.u)
                    ok &= bool(np.array_equal(pair.u.values, other.u.values)
                               and np.array_equal(pair.v.values, other.v.values)
                               and np.array_equal(replay_u.values, pair.u.values)
                               and np.array_equal(replay_v.values, pair.v.values))
                    if i == 0 and a is alphas[0] and b is betas[0] and (p := self._out("fixpoint.csv")) is not None:
                        pair.to_csv(p)
        self._check("fixpoint.replay", ok)

    def stage_solve_hji(self):
        vp, vm = self.value("plus"), self.value("minus")
        g_nodes = np.array([self.dyn.terminal_cost(x) for x in vp.space.nodes().reshape(-1, vp.space.N)])
        g_nodes = g_nodes.reshape(vp.space.shape)
        self._check("hji.terminal_exact", np.array_equal(vp.terminal, g_nodes) and np.array_equal(vm.terminal, g_nodes))
        gmax = float(np.abs(g_nodes).max())
        vmax = float(max(np.abs(vp.values).max(), np.abs(vm.values).max()))
        self._check("hji.bounded", vmax <= gmax * (1 + 1e-12) + 1e-12, vmax, gmax)
        tol = self.sc.hji.ordering_tolerance
        order = hji_solver.compare_values(vp, vm, tol)
        self.reports["ordering"] = {"min_difference": order.min_difference, "max_difference": order.max_difference}
        self._check("hji.ordering", not order.violated, order.min_difference, tol)
        expected = self.sc.checks.isaacs_expected
        if expected is True:
            self._check("hji.isaacs_bit_identical", np.array_equal(vp.values, vm.values))
        elif expected is False:
            self._check("hji.strict_gap_somewhere", order.max_difference > 0, order.max_difference)
        self.reports["value_at_x0"] = {"plus": float(vp.at(self.grid.t0, self.x0)),
                                       "minus": float(vm.at(self.grid.t0, self.x0))}
        if self.sc.checks.oracle is not None:
            err = self._oracle_error(vp)
            self.reports["oracle_error"] = err
            self._check(f"hji.oracle.{self.sc.checks.oracle.name}", err <= self.sc.checks.oracle.tolerance,
                        err, self.sc.checks.oracle.tolerance)
        for kind, vg in (("plus", vp), ("minus", vm)):
            if (p := self._out(f"value_{kind}.csv")) is not None:
                vg.to_csv(p, every=max(1, (len(vg.times) - 1) // 10))
            if (p := self._out(f"value_{kind}.bin")) is not None:
                vg.to_binary(p)

    def _oracle_error(self, vg) -> float:
        name = self.sc.checks.oracle.name
        T = self.grid.T
        mask = vg.space.region_mask(self.region)
        pts = vg.space.nodes()[mask]
        worst = 0.0
        for t, level in zip(vg.times, vg.values):
            if name == "terminal":
                exact = np.array([self.dyn.terminal_cost(x) for x in pts])
            elif name == "heat":
                s = float(self.sc.dynamics.get("sigma", 0.0))
                exact = np.sum(pts ** 2, axis=1) + self.dyn.N * s ** 2 * (T - t)
            else:
                exact = np.maximum(np.linalg.norm(pts, axis=1) - (T - t), 0.0)
            worst = max(worst, float(np.abs(level[mask] - exact).max()))
        return worst

    def stage_check_isaacs(self):
        lo = self.sc.hji.lo if self.sc.hji is not None else self.x0 - 1
        hi = self.sc.hji.hi if self.sc.hji is not None else self.x0 + 1
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0x15AAC5]))
        queries = []
        for _ in range(self.sc.checks.isaacs_queries):
            B = rng.standard_normal((self.dyn.N, self.dyn.N))
            queries.append(hamiltonian.HamiltonianQuery(B + B.T, rng.standard_normal(self.dyn.N),
                                                        rng.uniform(lo, hi), self.grid.t0))
        rep = hamiltonian.isaacs_gap(self.dyn, queries, self.U, self.V)
        self.reports["isaacs"] = {"max_gap": rep.max_gap, "min_gap": rep.min_gap, "holds": rep.holds,
                                  "worst_query": rep.worst_query}
        if (p := self._out("isaacs.json")) is not None:
            p.write_text(rep.to_json() + "\n")
        self._check("isaacs.weak_duality", rep.min_gap >= -1e-12, rep.min_gap, -1e-12)
        if self.sc.checks.isaacs_expected is not None:
            self._check("isaacs.expected", rep.holds == self.sc.checks.isaacs_expected, rep.max_gap, rep.tolerance)

    def stage_check_dpp(self):
        t1 = self.sc.checks.dpp_t1
        k1 = self.grid.step_of(t1)
        sub = TimeGrid(self.grid.t0, t1, k1, self.grid.delay_steps)
        alphas, betas = self.family("I", sub), self.family("II", sub)
        out = {}
        for kind, fn, name in (("plus", game_lab.check_subdpp, "dpp.sub"),
                               ("minus", game_lab.check_superdpp, "dpp.super")):
            tol = self.scheme_tolerance(kind, [self.grid.t0, t1])
            try:
                rep = fn(self.dyn, self.x0, sub, self.value(kind), alphas, betas, self.n_paths, self.seed, tol)
            except hji_solver.OutOfGrid as exc:
                out[kind] = {"error": str(exc)}
                self._check(name, False, str(exc))
                continue
            out[kind] = rep.as_dict()
            self._check(name, rep.holds, rep.margin, -rep.tolerance)
            if self.sc.checks.dpp_equality:
                self._check(name + ".equality", abs(rep.margin) <= rep.tolerance, rep.margin, rep.tolerance)
        self.reports["dpp"] = out

    def stage_regularity(self):
        bound = self.dyn.cost_lip * math.exp(self.dyn.lip_const * (self.grid.T - self.grid.t0))
        limit = 1.1 * bound
        out = {"bound": bound}
        for kind in ("plus", "minus"):
            fine = hji_solver.estimate_regularity(self.value(kind), self.region)
            coarse = hji_solver.estimate_regularity(self.coarse_value(kind), self.region)
            if max(fine.holder_t, coarse.holder_t) <= 1e-12:
                ratio = 1.0
            else:
                ratio = fine.holder_t / coarse.holder_t if coarse.holder_t > 0 else math.inf
            out[kind] = {"lipschitz_x": fine.lipschitz_x, "holder_t": fine.holder_t,
                         "holder_t_coarse": coarse.holder_t, "holder_ratio": ratio}
            self._check(f"regularity.{kind}.lipschitz", fine.lipschitz_x <= limit, fine.lipschitz_x, limit)
            self._check(f"regularity.{kind}.holder_stable", 0.5 <= ratio <= 2.0, ratio, [0.5, 2.0])
        alphas = [s for s in self.family("I", self.grid)]
        betas = [s for s in self.family("II", self.grid)]
        pick_a = next((s for s, spec in zip(alphas, self.sc.strategies.I) if spec.kind != "feedback"), None)
        pick_b = next((s for s, spec in zip(betas, self.sc.strategies.II) if spec.kind != "feedback"), None)
        if pick_a is not None and pick_b is not None:
            h = np.full(self.dyn.N, self.sc.checks.regularity_h / math.sqrt(self.dyn.N))
            lip = game_lab.cost_lipschitz(self.dyn, self.x0, h, pick_a, pick_b, self.grid, self.n_paths, self.seed)
            out["cost"] = {"ratio": lip.ratio, "std_error": lip.std_error}
            self._check("regularity.cost.lipschitz", lip.ratio <= limit + 3 * lip.std_error, lip.ratio, limit)
        self.reports["regularity"] = out

    def run(self, stages=None) -> dict:
        stages = list(self.sc.stages if stages is None else stages)
        check_stages(self.sc, stages)
        for st in STAGES:
            if st in stages:
                getattr(self, "stage_" + st.replace("-", "_"))()
        return self.summary()

    def summary(self) -> dict:
        return _plain({
            "schema": 1,
            "scenario": self.sc.name,
            "seed": self.seed,
            "n_paths": self.n_paths,
            "checks": [c.as_dict() for c in self.checks],
            "reports": self.reports,
            "artifacts": sorted(set(self.artifacts)),
            "passed": all(c.passed for c in self.checks),
        })


def dump_summary(summary: dict) -> str:
    return json.dumps(summary, sort_keys=True, indent=2) + "\n"


def run_scenario(path, seed=None, n_paths=None, out_dir=None, stages=None) -> dict:
    """Run a scenario file (or bundled name) and write ``summary.json`` into ``out_dir``."""
    sc = load_scenario(path)
    runner = ScenarioRun(sc, seed=seed, n_paths=n_paths, out_dir=out_dir)
    summary = runner.run(stages)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        summary["artifacts"] = sorted(set(summary["artifacts"]) | {"summary.json"})
        (Path(out_dir) / "summary.json").write_text(dump_summary(summary))
    return summary
