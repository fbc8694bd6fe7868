import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mafqi.distributions import (JointDistribution, NotFactorizedError, ProductPolicy, epsilon_greedy, eta_mixture,
                                 from_product, is_factorized, marginals, product_factors, uniform_distribution,
                                 uniform_policy)
from mafqi.env import encode, matrix_game_env, two_state_env
from mafqi.lvf import FactoredQ


def test_uniform_masses():
    np.testing.assert_array_equal(uniform_distribution(two_state_env()).table, 0.25)
    d = uniform_distribution(matrix_game_env())
    np.testing.assert_allclose(d.table, 1 / 9, rtol=0, atol=1e-16)
    assert d.factorized_origin and is_factorized(d, 2, 3).factorized


def test_from_product_uniform_matches_uniform():
    env = two_state_env()
    np.testing.assert_array_equal(from_product(uniform_policy(env)).table, uniform_distribution(env).table)


def test_from_product_delta():
    pol = ProductPolicy((np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])))
    d = from_product(pol)
    assert d.table[0, encode((0, 1), 2)] == 1.0
    assert d.table.sum() == 1.0


def test_from_product_multiplies():
    pol = ProductPolicy((np.array([[0.9, 0.1]]), np.array([[0.9, 0.1]])))
    assert from_product(pol).table[0, 0] == pytest.approx(0.81, abs=1e-15)


def test_policy_rejects_unnormalized():
    with pytest.raises(ValueError):
        ProductPolicy((np.array([[0.5, 0.6]]),))
    with pytest.raises(ValueError):
        ProductPolicy((np.array([[1.0, 0.0]]),), require_positive=True)


def test_joint_distribution_rejects_bad_rows():
    with pytest.raises(ValueError, match=r"table\[0\]"):
        JointDistribution(np.array([[0.5, 0.4]]), False)
    with pytest.raises(ValueError):
        JointDistribution(np.array([[1.5, -0.5]]), False)


def test_epsilon_greedy_formula():
    q = FactoredQ((np.array([[2.0, 1.0], [0.0, 3.0]]), np.array([[0.0, 0.0], [5.0, 1.0]])))
    d = epsilon_greedy(q, 0.1)
    np.testing.assert_allclose(d.policy.probs[0], [[0.95, 0.05], [0.05, 0.95]], atol=1e-15)
    # ties go to the lowest index
    np.testing.assert_allclose(d.policy.probs[1], [[0.95, 0.05], [0.95, 0.05]], atol=1e-15)


def test_epsilon_greedy_extremes():
    env = two_state_env()
    q = FactoredQ.random(env, np.random.default_rng(0))
    np.testing.assert_allclose(epsilon_greedy(q, 1.0).table, uniform_distribution(env).table, atol=1e-15)
    delta = epsilon_greedy(q, 0.0).table
    g = q.greedy()
    for s in range(2):
        j = encode((g[0][s], g[1][s]), 2)
        assert delta[s, j] == 1.0 and delta[s].sum() == 1.0
    with pytest.raises(ValueError):
        epsilon_greedy(q, 1.5)


@given(arrays(np.float64, (3, 3), elements=st.floats(-10, 10)), arrays(np.float64, (3, 3), elements=st.floats(-10, 10)),
       st.floats(0, 1))
def test_epsilon_greedy_marginals_exact(t0, t1, eps):
    q = FactoredQ((t0, t1))
    d = epsilon_greedy(q, eps)
    marg = marginals(d, 2, 3)
    for i, t in enumerate(q.tables):
        for x in range(3):
            expected = np.full(3, eps / 3)
            expected[np.argmax(t[x])] += 1 - eps
            np.testing.assert_allclose(marg[x, i], expected, atol=1e-12)


def test_eta_mixture_values():
    env = two_state_env()
    d0 = eta_mixture(env, 0.0)
    np.testing.assert_array_equal(d0.table, 0.25)
    assert d0.factorized_origin
    d1 = eta_mixture(env, 1.0).table
    diag, off = [encode((0, 0), 2), encode((1, 1), 2)], [encode((0, 1), 2), encode((1, 0), 2)]
    np.testing.assert_array_equal(d1[:, diag], 0.5)
    np.testing.assert_array_equal(d1[:, off], 0.0)
    dh = eta_mixture(env, 0.5)
    np.testing.assert_allclose(dh.table[:, diag], 0.375)
    np.testing.assert_allclose(dh.table[:, off], 0.125)
    assert not dh.factorized_origin
    with pytest.raises(ValueError):
        eta_mixture(matrix_game_env(), 0.5)


def test_is_factorized_witness_on_diagonal():
    check = is_factorized(eta_mixture(two_state_env(), 0.5), 2, 2)
    assert not check.factorized
    acts = check.witness[1]
    assert acts in (encode((0, 0), 2), encode((1, 1), 2))


@given(st.integers(1, 3), st.integers(2, 3), st.integers(0, 2**31 - 1))
def test_product_roundtrip_through_marginals(n, m, seed):
    rng = np.random.default_rng(seed)
    probs = []
    for _ in range(n):
        p = rng.uniform(0, 1, size=(2, m))
        probs.append(p / p.sum(axis=1, keepdims=True))
    d = from_product(ProductPolicy(tuple(probs)))
    assert is_factorized(d, n, m).factorized
    marg = marginals(d, n, m)
    for i in range(n):
        np.testing.assert_allclose(marg[:, i], probs[i], atol=1e-12)


def test_product_factors_refuses_correlated():
    env = two_state_env()
    with pytest.raises(NotFactorizedError, match="numeric"):
        product_factors(eta_mixture(env, 0.5), env)
    stripped = JointDistribution(uniform_distribution(env).table, False)
    pol = product_factors(stripped, env)
    np.testing.assert_allclose(pol.probs[0], 0.5)
