import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mafqi.distributions import eta_mixture, uniform_distribution
from mafqi.env import encode, matrix_game_env, random_mmdp, two_state_env
from mafqi.igm import (SupportError, greedy_is_optimal, igm_check, igm_decompose, igm_iterate, iteration_cap,
                       lex_argmax, optimal_joint_q, value_iteration)
from mafqi.lvf import FactoredQ, target_from_joint
from mafqi.env import identity_layer

S1, S2 = 0, 1


def test_first_iterate_is_reward():
    env = two_state_env()
    np.testing.assert_array_equal(igm_iterate(env, None, uniform_distribution(env), np.zeros((2, 4))), env.reward)


def test_support_required():
    env = two_state_env()
    with pytest.raises(SupportError, match="zero mass"):
        igm_iterate(env, None, eta_mixture(env, 1.0), np.zeros((2, 4)))


def test_value_iteration_two_state():
    q, iters = value_iteration(two_state_env(0.9), 1e-10)
    assert q[S2, encode((0, 0), 2)] == pytest.approx(10.0, abs=1e-8)
    assert q[S2, encode((0, 1), 2)] == pytest.approx(9.0, abs=1e-8)
    assert q[S2, encode((1, 1), 2)] == pytest.approx(0.0, abs=1e-12)
    assert q[S1].max() == 0.0
    assert iters <= iteration_cap(two_state_env(0.9), 1e-10)


def test_matrix_game_single_iterate():
    env = matrix_game_env()
    np.testing.assert_array_equal(igm_iterate(env, None, None, np.full((1, 9), 7.0)), env.reward)
    q, iters = value_iteration(env, 1e-10)
    np.testing.assert_array_equal(q, env.reward)


def test_huge_tolerance_single_iteration():
    env = random_mmdp(3, 2, 3, 2, 0.9)
    assert value_iteration(env, env.v_max)[1] <= 1
    assert iteration_cap(env, env.v_max) == 1


@pytest.mark.parametrize("seed", [3, 4, 5])
def test_value_iteration_fixed_point(seed):
    env = random_mmdp(seed, 2, 3, 2, 0.9)
    tol = 1e-9
    q, _ = value_iteration(env, tol)
    obs = identity_layer(2, 3)
    assert np.max(np.abs(target_from_joint(env, obs, q) - q)) <= tol


def test_decompose_matrix_game():
    f = igm_decompose(matrix_game_env().reward, 2, 3)
    for t in f.tables:
        np.testing.assert_array_equal(t, [[1, 0, 0]])


def test_decompose_constant_picks_first():
    f = igm_decompose(np.zeros((2, 8)), 3, 2)
    for t in f.tables:
        np.testing.assert_array_equal(t, [[1, 0], [1, 0]])


def test_lexicographic_tie_break_agent0_most_significant():
    q = np.zeros((1, 4))
    q[0, encode((0, 1), 2)] = 1.0
    q[0, encode((1, 0), 2)] = 1.0
    assert lex_argmax(q, 2, 2)[0] == encode((0, 1), 2)


def test_two_state_greedy():
    q = optimal_joint_q(two_state_env())
    f = igm_decompose(q, 2, 2)
    assert [int(np.argmax(t[S2])) for t in f.tables] == [0, 0]


def test_check_detects_mismatch():
    q = matrix_game_env().reward
    bad = FactoredQ((np.array([[0.0, 1.0, 0.0]]),) * 2)
    res = igm_check(q, bad)
    assert not res.consistent and res.witness == 0


@given(arrays(np.float64, (3, 9), elements=st.floats(-100, 100)))
def test_decompose_is_consistent(q):
    assert igm_check(q, igm_decompose(q, 2, 3)).consistent


@given(arrays(np.float64, (2, 8), elements=st.floats(-100, 100)), st.integers(-20, 20))
def test_decompose_scale_invariant(q, k):
    # power-of-two scaling is exact, so no ties are created or broken by rounding
    a, b = igm_decompose(q, 3, 2), igm_decompose(2.0**k * q, 3, 2)
    for ta, tb in zip(a.tables, b.tables):
        np.testing.assert_array_equal(ta, tb)


@given(arrays(np.int64, (2, 9), elements=st.integers(-50, 50)), st.floats(0.01, 100))
def test_decompose_scale_invariant_integer_tables(q, c):
    a, b = igm_decompose(q, 2, 3), igm_decompose(c * q, 2, 3)
    for ta, tb in zip(a.tables, b.tables):
        np.testing.assert_array_equal(ta, tb)


@given(st.lists(arrays(np.int64, (2, 3), elements=st.integers(-40, 40)), min_size=1, max_size=3))
def test_additive_tables_satisfy_igm(ints):
    # quarter-integer values keep sums exact, so ties are genuine ties
    f = FactoredQ(tuple(t / 4.0 for t in ints))
    assert igm_check(f.q_tot(), f).consistent


@given(st.integers(0, 2**31 - 1))
def test_operator_contracts(seed):
    rng = np.random.default_rng(seed)
    env = random_mmdp(seed, int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(2, 4)),
                      float(rng.uniform(0, 0.99)))
    shape = (env.num_states, env.num_joint_actions)
    for _ in range(20):
        q, q2 = rng.uniform(-5, 5, shape), rng.uniform(-5, 5, shape)
        lhs = np.abs(igm_iterate(env, None, None, q) - igm_iterate(env, None, None, q2)).max()
        assert lhs <= env.discount * np.abs(q - q2).max() + 1e-12


@given(st.integers(0, 2**31 - 1))
def test_error_decays_geometrically(seed):
    rng = np.random.default_rng(seed)
    env = random_mmdp(seed, 2, 3, 2, float(rng.uniform(0.1, 0.95)))
    q_star = optimal_joint_q(env)
    q = rng.uniform(-3, 3, size=q_star.shape)
    e0 = np.abs(q - q_star).max()
    for t in range(1, 30):
        q = igm_iterate(env, None, None, q)
        assert np.abs(q - q_star).max() <= env.discount**t * e0 + 1e-9


def test_greedy_is_optimal_flags():
    q = optimal_joint_q(two_state_env())
    assert greedy_is_optimal(q, np.array([0, 0])).all()
    assert not greedy_is_optimal(q, np.array([0, 3]))[S2]
