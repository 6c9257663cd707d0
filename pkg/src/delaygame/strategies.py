"""Nonanticipative strategies with delay and their mutual fixed point.

A strategy answers one delay block at a time. For block ``k`` (steps
``[k*D, (k+1)*D)``) it may look at the noise increments and at the
opponent's realized control indices with step index ``< k*D``, nothing more.
The inputs are handed over as :class:`GuardedPrefix` views that raise
:class:`DelayViolation` on any read past that limit, so a strategy that
peeks ahead fails loudly instead of silently producing a wrong fixed point.

Block 0 sees empty prefixes and is therefore a constant, which is what
starts the induction in :func:`fixed_point`.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .dynamics import GameDynamics, NonFiniteState, euler_step
from .path_space import BrownianPath, ControlPath, ControlSet, GridMismatch, SeedLike, TimeGrid

SIDES = ("I", "II")


class DelayViolation(RuntimeError):
    """A strategy read an input entry its delay does not allow it to see."""


class GuardedPrefix:
    """Read-only view of the first ``limit`` rows of a path array.

    Integer indexing and slicing past ``limit`` raise :class:`DelayViolation`.
    ``max_read`` records the largest index touched (-1 if none).
    """

    __slots__ = ("_data", "limit", "max_read", "label")

    def __init__(self, data: np.ndarray, limit: int, label: str = "input"):
        self._data = data
        self.limit = int(limit)
        self.max_read = -1
        self.label = label

    def __len__(self):
        return self.limit

    def _touch(self, hi: int):
        if hi >= self.limit:
            raise DelayViolation(
                f"read of {self.label}[{hi}] but only indices < {self.limit} are observable")
        self.max_read = max(self.max_read, hi)

    def __getitem__(self, key):
        if isinstance(key, slice):
            start, stop, step = key.indices(len(self._data))
            if key.stop is None:
                stop = min(stop, self.limit)
            idx = range(start, stop, step)
            if len(idx):
                self._touch(max(idx))
            return self._data[start:stop:step]
        if isinstance(key, tuple):
            head, rest = key[0], key[1:]
            return self[head][(slice(None),) + rest] if isinstance(head, slice) else self[head][rest]
        k = int(key)
        if k < 0:
            k += self.limit
        if k < 0:
            raise IndexError(key)
        self._touch(k)
        return self._data[k]

    def array(self) -> np.ndarray:
        """The whole observable prefix."""
        if self.limit:
            self._touch(self.limit - 1)
        out = self._data[: self.limit]
        return out

    def digest(self) -> bytes:
        return hashlib.blake2b(np.ascontiguousarray(self.array()).tobytes(), digest_size=16).digest()


Respond = Callable[[GuardedPrefix, GuardedPrefix, int], Sequence[int]]


@dataclass(frozen=True, eq=False)
class DelayedStrategy:
    """A side's strategy with delay ``delay_steps``.

    ``respond(noise, opponent, k)`` returns ``delay_steps`` control indices
    into ``controls`` for block ``k``. ``noise`` exposes BrownianPath
    increments (rows of length d) and ``opponent`` the opponent's control
    indices, each limited to step indices ``< k * delay_steps``.
    """

    side: str
    delay_steps: int
    respond: Respond
    controls: ControlSet
    name: str = "strategy"

    def __post_init__(self):
        if self.side not in SIDES:
            raise ValueError(f"side must be 'I' or 'II', got {self.side!r}")
        if int(self.delay_steps) != self.delay_steps or self.delay_steps < 1:
            raise ValueError("delay_steps must be a positive integer")

    def block(self, noise: GuardedPrefix, opponent: GuardedPrefix, k: int) -> np.ndarray:
        out = np.asarray(self.respond(noise, opponent, k)).reshape(-1)
        if out.shape != (self.delay_steps,):
            raise ValueError(f"{self.name}: block {k} has {out.size} values, expected {self.delay_steps}")
        out = out.astype(np.int64)
        if out.min() < 0 or out.max() >= len(self.controls):
            raise ValueError(f"{self.name}: control index out of range in block {k}")
        return out

    def reblock(self, delay_steps: int) -> "DelayedStrategy":
        """Same strategy answering finer blocks of ``delay_steps``.

        The original delay must be a multiple of the new one. A fine block
        is cut out of the coarse block containing it, which only reads what
        the fine block is allowed to read.
        """
        if delay_steps == self.delay_steps:
            return self
        if self.delay_steps % delay_steps:
            raise ValueError(f"cannot re-block delay {self.delay_steps} to {delay_steps}")
        ratio = self.delay_steps // delay_steps
        coarse = self

        def respond(noise, opponent, k):
            j, r = divmod(k, ratio)
            lim = j * coarse.delay_steps
            blk = coarse.block(GuardedPrefix(noise._data, lim, noise.label),
                               GuardedPrefix(opponent._data, lim, opponent.label), j)
            return blk[r * delay_steps:(r + 1) * delay_steps]

        return DelayedStrategy(self.side, delay_steps, respond, self.controls, f"{self.name}/reblock{delay_steps}")


@dataclass(frozen=True, eq=False)
class ControlPair:
    u: ControlPath
    v: ControlPath
    delay_steps: int

    def to_csv(self, path) -> None:
        grid = self.u.grid
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "time", "u_index", "v_index"])
            for k in range(grid.n_steps):
                w.writerow([k, repr(grid.time(k)), int(self.u.values[k]), int(self.v.values[k])])


def common_delay(alpha: DelayedStrategy, beta: DelayedStrategy) -> int:
    return min(alpha.delay_steps, beta.delay_steps)


def fixed_point(alpha: DelayedStrategy, beta: DelayedStrategy, w: BrownianPath,
                order: str = "I-first") -> ControlPair:
    """The unique control pair with ``u = alpha(w, v)`` and ``v = beta(w, u)``.

    Built by induction over delay blocks: block k of each side only needs
    blocks ``< k`` of the other, all of which are already known. ``order``
    chooses which side is evaluated first inside a block; the result does
    not depend on it.
    """
    if alpha.side != "I" or beta.side != "II":
        raise ValueError("alpha must be a Player I strategy and beta a Player II strategy")
    grid = w.grid
    D = common_delay(alpha, beta)
    if grid.n_steps % D:
        raise GridMismatch(f"n_steps={grid.n_steps} is not a multiple of the common delay {D}")
    a, b = alpha.reblock(D), beta.reblock(D)
    noise = w.increments
    u = np.zeros(grid.n_steps, dtype=np.int64)
    v = np.zeros(grid.n_steps, dtype=np.int64)
    sides = [(a, u, v), (b, v, u)]
    if order == "II-first":
        sides.reverse()
    elif order != "I-first":
        raise ValueError(f"unknown order {order!r}")
    for k in range(grid.n_steps // D):
        lim = k * D
        for strat, own, opp in sides:
            own[lim:lim + D] = strat.block(GuardedPrefix(noise, lim, "noise"),
                                           GuardedPrefix(opp, lim, "opponent"), k)
    return ControlPair(ControlPath(grid, u, alpha.controls), ControlPath(grid, v, beta.controls), D)


def apply_strategy(strat: DelayedStrategy, w: BrownianPath, opponent: ControlPath,
                   guarded: bool = True) -> ControlPath:
    """Controls produced by ``strat`` against a fully realized opponent path.

    With ``guarded=False`` every block sees the whole input; this is only
    useful for falsifying a strategy's declared delay.
    """
    grid = w.grid
    if opponent.grid != grid:
        raise GridMismatch("opponent path and noise path must share one grid")
    D = strat.delay_steps
    if grid.n_steps % D:
        raise GridMismatch(f"n_steps={grid.n_steps} is not a multiple of delay {D}")
    out = np.zeros(grid.n_steps, dtype=np.int64)
    for k in range(grid.n_steps // D):
        lim = k * D if guarded else grid.n_steps
        out[k * D:(k + 1) * D] = strat.block(GuardedPrefix(w.increments, lim, "noise"),
                                             GuardedPrefix(opponent.values, lim, "opponent"), k)
    return ControlPath(grid, out, strat.controls)


def lookup_strategy(path: ControlPath, side: str, delay_steps: int) -> DelayedStrategy:
    """Strategy that plays a fixed control path regardless of its inputs."""
    vals = np.array(path.values)

    def respond(noise, opponent, k):
        return vals[k * delay_steps:(k + 1) * delay_steps]

    return DelayedStrategy(side, delay_steps, respond, path.controls, "lookup")


# -- strategy families -------------------------------------------------------

def constant_strategy(side: str, controls: ControlSet, index: int, delay_steps: int = 1) -> DelayedStrategy:
    if not 0 <= index < len(controls):
        raise ValueError(f"control index {index} out of range")
    blk = np.full(delay_steps, index, dtype=np.int64)
    return DelayedStrategy(side, delay_steps, lambda noise, opp, k: blk, controls, f"constant[{index}]")


def copy_lagged_strategy(side: str, controls: ControlSet, opponent_controls: ControlSet,
                         first: int, delay_steps: int = 1) -> DelayedStrategy:
    """Play ``first`` on block 0, then repeat the opponent's previous block.

    Opponent controls are mapped to the nearest own control point.
    """
    D = delay_steps
    to_own = np.array([controls.nearest(p) for p in opponent_controls.points], dtype=np.int64)
    first_blk = np.full(D, first, dtype=np.int64)

    def respond(noise, opp, k):
        if k == 0:
            return first_blk
        return to_own[np.asarray(opp[(k - 1) * D:k * D], dtype=np.int64)]

    return DelayedStrategy(side, D, respond, controls, f"copy-lagged[{first}]")


def table_strategy(side: str, controls: ControlSet, seed: int, delay_steps: int = 1,
                   table_size: int = 257) -> DelayedStrategy:
    """Pseudo-random measurable strategy.

    The permitted prefix (block index, noise, opponent controls) is hashed
    to a row of a seeded table of control blocks.
    """
    D = delay_steps
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) % 2 ** 64, 0x7AB1E]))
    table = rng.integers(len(controls), size=(table_size, D))
    key = (int(seed) % 2 ** 64).to_bytes(8, "little")

    def respond(noise, opp, k):
        h = hashlib.blake2b(key + int(k).to_bytes(4, "little"), digest_size=8)
        h.update(np.ascontiguousarray(noise.array()).tobytes())
        h.update(np.ascontiguousarray(opp.array(), dtype=np.int64).tobytes())
        return table[int.from_bytes(h.digest(), "little") % table_size]

    return DelayedStrategy(side, D, respond, controls, f"table[{seed}]")


def noise_feedback_strategy(side: str, controls: ControlSet, rule: Callable[[np.ndarray], int],
                            delay_steps: int = 1, lag_blocks: int = 1) -> DelayedStrategy:
    """Open-loop adapted control: block k reads ``rule(W at step (k - lag_blocks) * D)``."""
    D = delay_steps

    def respond(noise, opp, k):
        m = max(k - lag_blocks, 0) * D
        wm = np.sum(noise[:m], axis=0) if m else np.zeros(noise._data.shape[1])
        return np.full(D, int(rule(wm)), dtype=np.int64)

    return DelayedStrategy(side, D, respond, controls, "noise-feedback")


def make_feedback_strategy(dyn: GameDynamics, x0, policy: Callable[[float, np.ndarray], int],
                           side: str, delay_steps: int, grid: TimeGrid,
                           own_controls: ControlSet, opponent_controls: ControlSet) -> DelayedStrategy:
    """Wrap a Markov policy ``policy(t, x) -> control index`` as a delayed strategy.

    Block k plays ``policy(t_{kD}, X_{(k-1)D})``, i.e. it acts on the state
    one delay block back, rebuilt by running the Euler map on the observed
    noise and opponent prefixes together with the strategy's own earlier
    blocks. Block 0 (and block 1) act on ``x0``.

    Reconstructions are memoized per observed prefix so that resolving a
    fixed point costs one Euler sweep instead of one per block; the memo
    never changes what is returned.
    """
    D = delay_steps
    x0 = np.asarray(x0, dtype=float).reshape(dyn.N)
    dt = grid.dt
    own_pts, opp_pts = own_controls.points, opponent_controls.points
    player_one = side == "I"
    memo: dict = {}

    def key(noise_data, opp_data, k):
        m = (k - 1) * D
        h = hashlib.blake2b(digest_size=16)
        h.update(noise_data[:m].tobytes())
        h.update(np.asarray(opp_data[:m], dtype=np.int64).tobytes())
        return k, h.digest()

    def first_actions():
        if "base" not in memo:
            memo["base"] = (int(policy(grid.time(0), x0)), int(policy(grid.time(D), x0)))
        return memo["base"]

    def action(noise_data, opp_data, k):
        # block k reads X_{(k-1)D}, which depends on inputs with index < (k-1)D
        if k <= 1:
            return first_actions()[k]
        j = k
        while j > 1 and key(noise_data, opp_data, j) not in memo:
            j -= 1
        if j > 1:
            states, actions = (list(a) for a in memo[key(noise_data, opp_data, j)])
        else:
            states, actions = [x0], list(first_actions())
        for level in range(j + 1, k + 1):
            b = level - 2  # block b moves X_{bD} to X_{(b+1)D}
            act = own_pts[actions[b]]
            x = states[-1]
            for s in range(b * D, (b + 1) * D):
                opp = opp_pts[int(opp_data[s])]
                u, v = (act, opp) if player_one else (opp, act)
                x = euler_step(dyn, x, u, v, dt, noise_data[s])
                if not np.all(np.isfinite(x)):
                    raise NonFiniteState(s + 1, x)
            states.append(x)
            actions.append(int(policy(grid.time(level * D), x)))
            if len(memo) > 4096:
                memo.clear()
            memo[key(noise_data, opp_data, level)] = (tuple(states), tuple(actions))
        return actions[k]

    def respond(noise, opp, k):
        a = action(np.asarray(noise.array()), np.asarray(opp.array()), k) if k > 1 else first_actions()[k]
        return np.full(D, a, dtype=np.int64)

    return DelayedStrategy(side, D, respond, own_controls, "feedback")


# -- delay falsification -----------------------------------------------------

@dataclass
class DelayReport:
    passed: bool
    trials: int
    counterexample: Optional[dict] = None


def verify_delay(strat: DelayedStrategy, grid: TimeGrid, opponent_controls: ControlSet, d: int,
                 trials: int, seed: SeedLike = 0) -> DelayReport:
    """Randomized falsification of the delay contract.

    Each trial draws two input pairs (noise, opponent path) that agree on
    steps ``< m`` for a random ``m``. Every block starting at or before ``m``
    is evaluated on both through views limited to its permitted prefix; the
    two answers must agree and no read may cross the limit. The underlying
    arrays differ past ``m``, so a strategy that bypasses the views is caught
    as well.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    D = strat.delay_steps
    n = grid.n_steps
    sq = np.sqrt(grid.dt)
    for t in range(trials):
        m = int(rng.integers(0, n + 1))
        w1 = rng.standard_normal((n, d)) * sq
        w2 = w1.copy()
        w2[m:] = rng.standard_normal((n - m, d)) * sq
        o1 = rng.integers(len(opponent_controls), size=n)
        o2 = o1.copy()
        o2[m:] = rng.integers(len(opponent_controls), size=n - m)
        for k in range(n // D):
            lim = k * D
            if lim > m:
                break
            try:
                b1 = strat.block(GuardedPrefix(w1, lim), GuardedPrefix(o1, lim), k)
                b2 = strat.block(GuardedPrefix(w2, lim), GuardedPrefix(o2, lim), k)
            except DelayViolation as exc:
                return DelayReport(False, t + 1, {"trial": t, "prefix": m, "block": k, "violation": str(exc)})
            if not np.array_equal(b1, b2):
                return DelayReport(False, t + 1, {"trial": t, "prefix": m, "block": k,
                                                  "first": b1.tolist(), "second": b2.tolist()})
    return DelayReport(True, trials)
