import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from delaygame.dynamics import GameDynamics, builtin_dynamics
from delaygame.hamiltonian import (HamiltonianQuery, h_minus, h_plus, inf_sup, isaacs_gap, payoff, payoff_matrix,
                                   random_queries, saddle, sup_inf)
from delaygame.path_space import ControlSet, discretize_interval

SEP = builtin_dynamics({"name": "separated", "sigma": 0.0})
U3 = discretize_interval(-1, 1, 3)
Q1 = HamiltonianQuery(np.zeros((1, 1)), [1.0], [0.0])


def indices(n):
    return ControlSet(np.arange(n, dtype=float)[:, None])


def matrix_game(M):
    return builtin_dynamics({"name": "matrix-game", "matrix": np.asarray(M).tolist()})


def test_payoff_examples():
    dyn = GameDynamics(lambda x, u, v: np.array([3.0]), lambda x, u, v: np.eye(1), lambda x: 0.0, 1, 1)
    q = HamiltonianQuery([[2.0]], [1.0], [0.0])
    assert payoff(dyn, q, [0.0], [0.0]) == 4.0
    zero = HamiltonianQuery([[0.0]], [0.0], [0.3])
    assert all(payoff(dyn, zero, u, v) == 0.0 for u in U3.points for v in U3.points)
    assert payoff(SEP, Q1, [-1.0], [1.0]) == 0.0
    with pytest.raises(ValueError):
        payoff(dyn, HamiltonianQuery(np.zeros((2, 2)), [0, 0], [0, 0]), [0.0], [0.0])


def test_query_symmetrizes_and_validates():
    q = HamiltonianQuery([[1.0, 2.0], [0.0, 1.0]], [0, 0], [0, 0])
    assert np.array_equal(q.A, q.A.T)
    with pytest.raises(ValueError):
        HamiltonianQuery(np.eye(2), [0.0], [0.0, 0.0])


def test_two_by_two_without_saddle_point():
    dyn = matrix_game([[0, 1], [1, 0]])
    assert h_plus(dyn, Q1, indices(2), indices(2)) == (1.0, 0)
    assert h_minus(dyn, Q1, indices(2), indices(2))[0] == 0.0


def test_constant_and_separated_cases():
    dyn = GameDynamics(lambda x, u, v: np.array([2.5]), lambda x, u, v: np.array([[1.0]]), lambda x: 0.0, 1, 1)
    q = HamiltonianQuery([[2.0]], [1.0], [0.0])
    assert h_plus(dyn, q, U3, U3)[0] == payoff(dyn, q, [0.0], [0.0]) == h_minus(dyn, q, U3, U3)[0]
    assert h_plus(SEP, Q1, U3, U3)[0] == 0.0
    assert h_minus(SEP, Q1, U3, U3)[0] == 0.0


def test_empty_control_set_rejected():
    class Empty:
        points = np.zeros((0, 1))

        def __len__(self):
            return 0

    with pytest.raises(ValueError):
        payoff_matrix(SEP, Q1, Empty(), U3)


def test_isaacs_gap_examples():
    rep = isaacs_gap(SEP, random_queries(1, 100, seed=1), U3, U3)
    assert rep.max_gap == 0.0 and rep.holds
    sep2 = builtin_dynamics({"name": "separated", "N": 2, "sigma": 0.5})
    U2 = ControlSet(np.array([[a, b] for a in (-1.0, 0.0, 1.0) for b in (-1.0, 1.0)]))
    assert isaacs_gap(sep2, random_queries(2, 100, seed=2), U2, U2).max_gap == 0.0
    rep = isaacs_gap(matrix_game([[0, 1], [1, 0]]), [Q1], indices(2), indices(2))
    assert rep.max_gap == 1.0 and not rep.holds
    assert json.loads(rep.to_json())["worst_query"]["xi"] == [1.0]
    zero = HamiltonianQuery([[0.0]], [0.0], [0.0])
    assert isaacs_gap(matrix_game([[0, 1], [1, 0]]), [zero], indices(2), indices(2)).max_gap == 0.0
    with pytest.raises(ValueError):
        isaacs_gap(SEP, [], U3, U3)


matrices = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)),
                  elements=st.floats(-10, 10, allow_nan=False))


@settings(max_examples=150, deadline=None)
@given(matrices)
def test_weak_duality_on_any_matrix(M):
    hp, _ = inf_sup(M)
    hm, _ = sup_inf(M)
    assert hp >= hm


@settings(max_examples=60, deadline=None)
@given(matrices, st.data())
def test_refining_a_players_grid(M, data):
    m, n = M.shape
    dyn = matrix_game(M)
    cols = sorted(data.draw(st.sets(st.integers(0, n - 1), min_size=1)))
    rows = sorted(data.draw(st.sets(st.integers(0, m - 1), min_size=1)))
    Vsub = ControlSet(np.array(cols, dtype=float)[:, None])
    Usub = ControlSet(np.array(rows, dtype=float)[:, None])
    U, V = indices(m), indices(n)
    # more options for the maximizer never lower H+, more for the minimizer never raise it
    assert h_plus(dyn, Q1, U, V)[0] >= h_plus(dyn, Q1, U, Vsub)[0]
    assert h_plus(dyn, Q1, U, V)[0] <= h_plus(dyn, Q1, Usub, V)[0]
    assert h_minus(dyn, Q1, U, V)[0] >= h_minus(dyn, Q1, U, Vsub)[0]
    assert h_minus(dyn, Q1, U, V)[0] <= h_minus(dyn, Q1, Usub, V)[0]


@settings(max_examples=60, deadline=None)
@given(arrays(np.int64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=st.integers(-20, 20)),
       st.integers(1, 50))
def test_shift_moves_values_not_arguments(M, c):
    dyn, shifted = matrix_game(M), matrix_game(M + c)
    U, V = indices(M.shape[0]), indices(M.shape[1])
    a, b = saddle(dyn, Q1, U, V), saddle(shifted, Q1, U, V)
    assert b.h_plus == a.h_plus + c and b.h_minus == a.h_minus + c
    assert (a.arg_u_plus, a.arg_v_minus) == (b.arg_u_plus, b.arg_v_minus)


def test_weak_duality_on_random_dynamics():
    rng = np.random.default_rng(0)
    for trial in range(20):
        W = rng.standard_normal((3, 2, 2))
        dyn = GameDynamics(lambda x, u, v, W=W: np.array([np.sin(W[0, 0, 0] * x[0] + u[0] * v[0]), u[0] - W[1, 0, 1] * v[0]]),
                           lambda x, u, v, W=W: W[2] * (1 + 0.5 * np.tanh(u[0] - v[0] + x[1])),
                           lambda x: 0.0, 2, 2)
        rep = isaacs_gap(dyn, random_queries(2, 20, seed=trial), U3, discretize_interval(-1, 1, 4))
        assert rep.min_gap >= -1e-12
