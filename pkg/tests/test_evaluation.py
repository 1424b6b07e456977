import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mdpcrit.envs import BLUE, RED, gridnav, loop1, puterman3, puterman3_zrat, random_unichain_mdp
from mdpcrit.evaluation import (DivergenceError, PolicyFeaturizer, deviation_matrix,
                                discounted_q, discounted_values, effective_horizon, evaluate_all,
                                finite_difference_gain_gradient, gain, gain_from_discounted,
                                gain_gradient, geometric_termination_estimate,
                                gradient_identity_residual, improper_discounted_matrix,
                                laurent_coefficients, laurent_reconstruction,
                                nested_equation_residuals, policy_gain, relative_values,
                                stationary_gradient, total_values, truncation_residual)
from mdpcrit.mdp import InducedChain, Mdp, PolicyTable, ValidationError, deterministic_chain

seeds = st.integers(0, 2**32 - 1)

RED_CHAIN = deterministic_chain(puterman3(), RED)
BLUE_CHAIN = deterministic_chain(puterman3(), BLUE)
LOOP = deterministic_chain(loop1(3.0), (0,))
SWAP = InducedChain(np.array([[0.0, 1.0], [1.0, 0.0]]), np.array([2.0, 0.0]))


def _random_chain(rng, n):
    return InducedChain(rng.dirichlet(np.ones(n), size=n), rng.uniform(-1, 1, n))


def test_discounted_examples():
    assert discounted_values(BLUE_CHAIN, 0.3)[0] == pytest.approx(2.0)
    assert discounted_values(RED_CHAIN, 0.5)[0] == pytest.approx(1.5)
    assert discounted_values(LOOP, 0.5)[0] == pytest.approx(6.0)


def test_discounted_q_examples():
    assert discounted_q(loop1(3.0), PolicyTable(np.ones((1, 1))), 0.5)[0, 0] == pytest.approx(6.0)
    q = discounted_q(puterman3(), PolicyTable.deterministic(RED, 2), 0.5)
    assert q[0, 0] == pytest.approx(1.5) and q[0, 1] == pytest.approx(2.0)


def test_total_values():
    np.testing.assert_allclose(total_values(BLUE_CHAIN), [2, 1, 0])
    np.testing.assert_allclose(total_values(RED_CHAIN), [2, 1, 0])
    with pytest.raises(DivergenceError):
        total_values(deterministic_chain(loop1(1.0), (0,)))


def test_gain_examples():
    assert gain(LOOP)[0] == pytest.approx(3.0)
    np.testing.assert_allclose(gain(RED_CHAIN), 0)
    np.testing.assert_allclose(gain(BLUE_CHAIN), 0)
    np.testing.assert_allclose(gain(SWAP), [1.0, 1.0])


def test_deviation_matrix_examples():
    dev = deviation_matrix(BLUE_CHAIN)
    np.testing.assert_allclose(dev.d, np.eye(3) - dev.pstar, atol=1e-12)
    np.testing.assert_allclose(deviation_matrix(LOOP).d, [[0.0]])
    np.testing.assert_allclose(deviation_matrix(InducedChain(np.eye(2), np.zeros(2))).d, 0)


def test_laurent_examples():
    lc = laurent_coefficients(BLUE_CHAIN, 1)
    np.testing.assert_allclose(lc.as_array(), [[0, 0, 0], [2, 1, 0], [-2, -1, 0]], atol=1e-12)
    lc = laurent_coefficients(RED_CHAIN, 1)
    np.testing.assert_allclose(lc.bias, [2, 1, 0], atol=1e-12)
    np.testing.assert_allclose(lc.v(1), [-3, -1, 0], atol=1e-12)
    lc = laurent_coefficients(LOOP, 2)
    np.testing.assert_allclose(lc.as_array(), [[3], [0], [0], [0]], atol=1e-12)


def test_truncation_examples():
    np.testing.assert_allclose(truncation_residual(BLUE_CHAIN, 0.7), 0, atol=1e-12)
    assert truncation_residual(RED_CHAIN, 0.7)[0] == pytest.approx(-0.3)


def test_identity_examples():
    res = gain_from_discounted(LOOP, [0.25])[0]
    assert res.weighted == pytest.approx(0, abs=1e-12) and res.scaled == pytest.approx(0, abs=1e-12)
    assert gain_from_discounted(RED_CHAIN, [0.3])[0].weighted < 1e-12


def test_improper_matrix():
    np.testing.assert_allclose(improper_discounted_matrix(LOOP, 0.5), [[2.0]])
    np.testing.assert_allclose(improper_discounted_matrix(SWAP, 0.0), np.eye(2))


def test_effective_horizon():
    assert effective_horizon(0.9, 0.1, 1.0) == 44
    assert effective_horizon(0.5, 1.0, 1.0) == 1
    with pytest.raises(ValidationError):
        effective_horizon(1.0, 0.1, 1.0)


def test_effective_horizon_is_smallest_tail_bound():
    for gamma, eps in ((0.9, 0.1), (0.99, 0.5), (0.7, 0.01)):
        tau = effective_horizon(gamma, eps, 1.0)
        assert gamma**tau / (1 - gamma) <= eps + 1e-12
        assert gamma ** (tau - 1) / (1 - gamma) > eps


def test_monte_carlo_examples():
    est = geometric_termination_estimate(loop1(3.0), PolicyTable(np.ones((1, 1))), 0.5,
                                         100_000, seed=1)
    assert abs(est.mean[0] - 6.0) <= 3 * est.stderr[0]
    est = geometric_termination_estimate(puterman3(), PolicyTable.deterministic(BLUE, 2), 0.5,
                                         100_000, seed=2, starts=[0])
    assert abs(est.mean[0] - 2.0) <= 3 * max(est.stderr[0], 1e-12)


def test_monte_carlo_gamma_zero_is_one_reward():
    m = puterman3()
    est = geometric_termination_estimate(m, PolicyTable.deterministic(RED, 2), 0.0, 500, seed=3)
    np.testing.assert_array_equal(est.mean, [1, 1, 0])
    np.testing.assert_array_equal(est.stderr, 0)


@pytest.mark.parametrize("policy", [RED, BLUE])
def test_monte_carlo_within_four_errors(policy):
    m = puterman3()
    table = PolicyTable.deterministic(policy, 2)
    est = geometric_termination_estimate(m, table, 0.8, 50_000, seed=11)
    exact = discounted_values(deterministic_chain(m, policy), 0.8)
    assert np.all(np.abs(est.mean - exact) <= 4 * est.stderr + 1e-12)


def test_total_equals_bias_on_terminal_model():
    m = gridnav(3).mdp
    rng = np.random.default_rng(0)
    for _ in range(10):
        chain = deterministic_chain(m, [int(rng.choice(m.actions(s))) for s in range(m.num_states)])
        if gain(chain).max() < -1e-12:
            continue   # some policies never reach the goal
        np.testing.assert_allclose(total_values(chain), laurent_coefficients(chain, 0).bias,
                                   atol=1e-9)
    for pol in (RED, BLUE):
        chain = deterministic_chain(puterman3_zrat().mdp, pol)
        np.testing.assert_allclose(total_values(chain), laurent_coefficients(chain, 0).bias,
                                   atol=1e-9)


def test_relative_values_zero_at_reference():
    rv = relative_values(SWAP, 1)
    assert rv[1] == 0.0 and rv[0] == pytest.approx(1.0)


def test_evaluate_all_keys():
    doc = evaluate_all(RED_CHAIN, 0.5, 1)
    assert doc["v_gamma"] == [1.5, 1.0, 0.0]
    assert doc["v_bias"] == [2.0, 1.0, 0.0]
    assert set(doc["residuals"]) == {"nested", "bellman", "truncation"}
    assert "v_gamma" not in evaluate_all(RED_CHAIN, None, 1)


def test_gradient_symmetric_actions_is_zero():
    m = Mdp(np.ones((1, 2, 1)), np.array([[1.0, 1.0]]), np.ones(1))
    feat = PolicyFeaturizer(np.array([[[0.0], [1.0]]]))
    assert gain_gradient(m, feat, [0.3]) == pytest.approx([0.0])


def test_gradient_single_state_softmax():
    m = Mdp(np.ones((1, 2, 1)), np.array([[0.0, 1.0]]), np.ones(1))
    feat = PolicyFeaturizer(np.array([[[0.0], [1.0]]]))
    for theta in (-2.0, 0.0, 0.7):
        sig = 1 / (1 + math.exp(-theta))
        assert policy_gain(m, feat, [theta]) == pytest.approx(sig)
        assert gain_gradient(m, feat, [theta])[0] == pytest.approx(sig * (1 - sig))


def test_gradient_four_state_matches_fd():
    rng = np.random.default_rng(5)
    m = random_unichain_mdp(rng, 4, 2)
    feat = PolicyFeaturizer(rng.normal(size=(4, 2, 2)))
    theta = rng.normal(size=2)
    exact = gain_gradient(m, feat, theta)
    fd = finite_difference_gain_gradient(m, feat, theta)
    assert np.abs(exact - fd).max() <= 1e-4 * np.abs(exact).max()


def test_stationary_gradient_sums_to_zero():
    rng = np.random.default_rng(6)
    m = random_unichain_mdp(rng, 4, 2)
    feat = PolicyFeaturizer(rng.normal(size=(4, 2, 3)))
    assert np.abs(stationary_gradient(m, feat, rng.normal(size=3)).sum(axis=1)).max() < 1e-12


def test_two_term_identity_holds_at_gamma_zero():
    rng = np.random.default_rng(7)
    m = random_unichain_mdp(rng, 4, 2)
    feat = PolicyFeaturizer(rng.normal(size=(4, 2, 2)))
    assert gradient_identity_residual(m, feat, rng.normal(size=2), 0.0).residual < 1e-8


def test_transition_sum_converges_only_near_one():
    rng = np.random.default_rng(8)
    m = random_unichain_mdp(rng, 4, 2)
    m = m.replace(reward=np.repeat(rng.uniform(-1, 1, (4, 1)), 2, axis=1))
    feat = PolicyFeaturizer(rng.normal(size=(4, 2, 2)))
    theta = rng.normal(size=2)
    errs = [gradient_identity_residual(m, feat, theta, g).transition_sum_error
            for g in (0.5, 0.9, 0.99, 0.999)]
    assert errs[-1] < 1e-2
    assert errs[-1] < errs[0]


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(1, 6), st.sampled_from([0.0, 0.5, 0.99]))
def test_bellman_residual(seed, n, gamma):
    chain = _random_chain(np.random.default_rng(seed), n)
    v = discounted_values(chain, gamma)
    assert np.abs(v - (chain.r_pi + gamma * chain.p_pi @ v)).max() < 1e-10


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(1, 6))
def test_deviation_matrix_identities(seed, n):
    chain = _random_chain(np.random.default_rng(seed), n)
    dev = deviation_matrix(chain)
    i = np.eye(n)
    assert np.abs(dev.d @ (i - chain.p_pi + dev.pstar) - (i - dev.pstar)).max() < 1e-9
    assert np.abs(dev.pstar @ dev.d).max() < 1e-9
    assert np.abs(dev.d @ dev.pstar).max() < 1e-9


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(1, 6))
def test_nested_equations(seed, n):
    chain = _random_chain(np.random.default_rng(seed), n)
    lc = laurent_coefficients(chain, 4)
    assert nested_equation_residuals(chain, lc).max() < 1e-9


@settings(max_examples=30, deadline=None)
@given(seeds, st.sampled_from([0.3, 0.6, 0.9, 0.99]))
def test_gain_discount_identity_property(seed, gamma):
    rng = np.random.default_rng(seed)
    m = random_unichain_mdp(rng, int(rng.integers(2, 6)), 2)
    chain = deterministic_chain(m, rng.integers(2, size=m.num_states))
    assert gain_from_discounted(chain, [gamma])[0].weighted < 1e-10


def test_scaled_discounted_value_approaches_gain():
    chain = _random_chain(np.random.default_rng(9), 5)
    scaled = [r.scaled for r in gain_from_discounted(chain, [0.5, 0.9, 0.99, 0.999])]
    assert scaled == sorted(scaled, reverse=True)


def test_improper_matrix_rows_and_limit():
    chain = _random_chain(np.random.default_rng(10), 4)
    for gamma in (0.3, 0.9):
        pg = improper_discounted_matrix(chain, gamma)
        np.testing.assert_allclose(pg.sum(axis=1), 1 / (1 - gamma), atol=1e-8)
    gamma = 1 - 1e-6
    pstar = deviation_matrix(chain).pstar
    assert np.abs((1 - gamma) * improper_discounted_matrix(chain, gamma) - pstar).max() < 1e-4


def test_reconstruction_improves_with_more_terms():
    # non-unit eigenvalue -0.2, so D has spectral radius 1/1.2 and the series
    # converges at gamma = 0.6 with ratio (2/3)/1.2
    p = np.full((4, 4), 0.3) - np.eye(4) * 0.2
    chain = InducedChain(p, np.array([1.0, 0.0, -1.0, 0.5]))
    lc = laurent_coefficients(chain, 40)
    v = discounted_values(chain, 0.6)
    errs = [np.abs(laurent_reconstruction(lc, 0.6, n) - v).max() for n in (5, 10, 20, 40)]
    assert errs == sorted(errs, reverse=True)
    assert errs[-1] < 1e-6


def test_reconstruction_needs_coefficients():
    lc = laurent_coefficients(SWAP, 3)
    with pytest.raises(ValidationError):
        laurent_reconstruction(lc, 0.6, 4)
