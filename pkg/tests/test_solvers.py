import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mdpcrit.chains import MultichainError
from mdpcrit.envs import (BLUE, RED, chain_env, gridnav, loop1, puterman3, puterman3_zrat,
                          random_mdp, random_unichain_mdp, torus_env)
from mdpcrit.evaluation import discounted_values, gain
from mdpcrit.mdp import Mdp, ValidationError, deterministic_chain, enumerate_deterministic_policies
from mdpcrit.solvers import (ConvergenceError, bellman_optimality, blackwell_gamma,
                             misspecification_bound_check, n_discount_optimal_sets,
                             policy_iteration_average, policy_iteration_discounted,
                             policy_iteration_total, relative_value_iteration, solve,
                             value_iteration_discounted)
from mdpcrit.transform import zrat_to_rst

seeds = st.integers(0, 2**32 - 1)
SWAP_MDP = Mdp(np.array([[[0.0, 1.0]], [[1.0, 0.0]]]), np.array([[2.0], [0.0]]), [1.0, 0.0])


def _enumerated_discounted_set(mdp, gamma, tol=1e-9):
    vals = {p: discounted_values(deterministic_chain(mdp, p), gamma)
            for p in enumerate_deterministic_policies(mdp)}
    best = np.max(list(vals.values()), axis=0)
    return {p for p, v in vals.items() if np.all(v >= best - tol * max(1, np.abs(best).max()))}


def _enumerated_gain(mdp):
    return max(gain(deterministic_chain(mdp, p)).max() for p in enumerate_deterministic_policies(mdp))


def test_value_iteration_examples():
    assert value_iteration_discounted(loop1(3.0), 0.5).value[0] == pytest.approx(6.0)
    res = value_iteration_discounted(puterman3(), 0.5)
    assert res.value[0] == pytest.approx(2.0) and res.first_policy()[0] == 1
    m = random_mdp(np.random.default_rng(0), 4, 3)
    res = value_iteration_discounted(m, 0.0)
    np.testing.assert_allclose(res.value, m.reward.max(axis=1))


def test_discounted_argmax_sets():
    assert policy_iteration_discounted(puterman3(), 0.5).policy_set() == {BLUE}
    assert policy_iteration_discounted(puterman3(), 0.0).policy_set() == {BLUE}


def test_duplicate_actions_both_kept():
    p = np.zeros((2, 2, 2))
    p[0, :, 1] = 1.0
    p[1, :, 0] = 1.0
    m = Mdp(p, np.array([[1.0, 1.0], [0.0, 0.0]]), [1.0, 0.0])
    assert policy_iteration_discounted(m, 0.9).action_sets[0] == (0, 1)


def test_policy_iteration_close_to_one_keeps_ties_apart():
    # exact ties at s1, s2 but a bias gap at s0 that is invisible in v_gamma alone
    res = policy_iteration_discounted(puterman3(), 1 - 1e-6)
    assert res.policy_set() == {BLUE}


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(1, 4), st.integers(1, 3), st.sampled_from([0.0, 0.5, 0.9, 0.99]))
def test_pi_set_matches_enumeration(seed, n, a, gamma):
    m = random_mdp(np.random.default_rng(seed), n, a)
    res = policy_iteration_discounted(m, gamma)
    assert res.policy_set() == _enumerated_discounted_set(m, gamma)
    vi = value_iteration_discounted(m, gamma, tol=1e-12)
    assert np.abs(vi.value - res.value).max() < 1e-8 / (1 - gamma)


def test_average_examples():
    assert policy_iteration_average(loop1(3.0)).value[0] == pytest.approx(3.0)
    rst2 = zrat_to_rst(gridnav(2)).mdp
    assert policy_iteration_average(rst2).value[0] == pytest.approx(_enumerated_gain(rst2))


def test_gridnav5_gain_equals_optimal_loop_average():
    rst = zrat_to_rst(gridnav(5))
    res = policy_iteration_average(rst.mdp)
    chain = deterministic_chain(rst.mdp, res.first_policy())
    # one renewal cycle: expected reward and length from the reset state back to itself
    n = rst.mdp.num_states
    keep = np.arange(n) != rst.state
    q = chain.p_pi[np.ix_(keep, keep)]
    steps = np.linalg.solve(np.eye(n - 1) - q, np.ones(n - 1))
    reward = np.linalg.solve(np.eye(n - 1) - q, chain.r_pi[keep])
    isd = rst.mdp.isd[keep]
    assert res.value[0] == pytest.approx((isd @ reward) / (isd @ steps + 1), rel=1e-10)


def test_puterman3_reset_model_gains():
    rst = zrat_to_rst(puterman3_zrat())
    red = gain(deterministic_chain(rst.mdp, (0, 0, 2)))
    blue = gain(deterministic_chain(rst.mdp, (1, 0, 2)))
    np.testing.assert_allclose(red, 2 / 3)     # rewards 1, 1, 0 over a 3-step cycle
    np.testing.assert_allclose(blue, 1.0)      # rewards 2, 0 over a 2-step cycle
    res = policy_iteration_average(rst.mdp)
    assert res.value[0] == pytest.approx(1.0) and res.policy_set() == {(1, 0, 2)}


def test_average_rejects_multichain():
    p = np.zeros((2, 1, 2))
    p[0, 0, 0] = p[1, 0, 1] = 1.0
    m = Mdp(p, np.array([[1.0], [0.0]]), [0.5, 0.5])
    with pytest.raises(MultichainError):
        policy_iteration_average(m)


def test_rvi():
    res = relative_value_iteration(loop1(3.0))
    assert res.value[0] == pytest.approx(3.0) and res.iterations == 1
    rst2 = zrat_to_rst(gridnav(2))
    rvi = relative_value_iteration(rst2.mdp, s_ref=rst2.state)
    assert abs(rvi.value[0] - policy_iteration_average(rst2.mdp).value[0]) < 1e-8


def test_rvi_periodic_needs_damping():
    with pytest.raises(ConvergenceError, match="damping"):
        relative_value_iteration(SWAP_MDP, max_iters=500)
    res = relative_value_iteration(SWAP_MDP, damping=0.99)
    assert res.value[0] == pytest.approx(1.0, abs=1e-8)


def test_rvi_aperiodic_chain_matches_pstar_gain():
    p = np.array([[[0.3, 0.7]], [[0.6, 0.4]]])
    m = Mdp(p, np.array([[1.0], [-2.0]]), [1.0, 0.0])
    expected = gain(deterministic_chain(m, (0, 0)))[0]
    assert relative_value_iteration(m).value[0] == pytest.approx(expected, abs=1e-9)


def test_total_reward():
    res = policy_iteration_total(puterman3())
    assert res.policy_set() == {RED, BLUE}
    np.testing.assert_allclose(res.value, [2, 1, 0])
    with pytest.raises(ValidationError):
        policy_iteration_total(loop1(3.0))


def test_n_discount_examples():
    levels = n_discount_optimal_sets(puterman3(), 1)
    assert [set(r.policies) for r in levels] == [{RED, BLUE}, {RED, BLUE}, {BLUE}]
    assert all(set(r.policies) == {(0,)} for r in n_discount_optimal_sets(loop1(), 3))


def test_blackwell_trivial_cases():
    assert blackwell_gamma(puterman3()).gamma_bw_hat <= 1e-3
    assert blackwell_gamma(loop1()).gamma_bw_hat <= 1e-3


def test_blackwell_set_is_stable_above_estimate():
    m = chain_env(4)
    est = blackwell_gamma(m, tol=1e-4)
    for g in np.linspace(est.gamma_bw_hat, 0.999, 12):
        assert policy_iteration_discounted(m, g).action_sets == est.blackwell_sets
    below = max(est.bracket[0] - 1e-3, 0.0)
    assert policy_iteration_discounted(m, est.bracket[0]).action_sets != est.blackwell_sets
    assert below < est.gamma_bw_hat


def test_sweep_log_is_piecewise_constant():
    est = blackwell_gamma(chain_env(5), grid_size=60)
    ids = [i for _, i in est.sweep_log]
    changes = sum(a != b for a, b in zip(ids, ids[1:]))
    assert len(est.distinct_sets) >= 2 and changes < len(ids) // 4


@pytest.mark.parametrize("mdp", [puterman3(), loop1(), chain_env(5), torus_env(),
                                 zrat_to_rst(gridnav(2)).mdp])
def test_n_discount_sets_nested(mdp):
    sets = [set(r.policies) for r in n_discount_optimal_sets(mdp, mdp.num_states)]
    assert all(b <= a and b for a, b in zip(sets, sets[1:]))


@pytest.mark.parametrize("mdp", [chain_env(5), torus_env()])
def test_recurrent_gain_set_equals_blackwell_set(mdp):
    levels = n_discount_optimal_sets(mdp, mdp.num_states)
    assert set(levels[0].policies) == set(levels[-1].policies)
    assert set(levels[0].policies) == blackwell_gamma(mdp).blackwell_set


def test_gain_underselective_on_puterman3():
    levels = n_discount_optimal_sets(puterman3(), 1)
    assert set(levels[0].policies) > blackwell_gamma(puterman3()).blackwell_set


def test_misspecification_examples():
    m = random_mdp(np.random.default_rng(0), 4, 2)
    assert misspecification_bound_check(m, 0.7, 0.7) == (0.0, 0.0)
    assert misspecification_bound_check(puterman3(), 0.0, 0.0)[0] == 0.0
    with pytest.raises(ValidationError):
        misspecification_bound_check(m, 0.8, 0.7)


@settings(max_examples=50, deadline=None)
@given(seeds, st.floats(0.0, 0.98), st.floats(0.0, 1.0))
def test_misspecification_bound(seed, gamma_bw, frac):
    m = random_mdp(np.random.default_rng(seed), 4, 2)
    lhs, rhs = misspecification_bound_check(m, gamma_bw * frac, gamma_bw)
    assert lhs <= rhs + 1e-9


@settings(max_examples=60, deadline=None)
@given(seeds, st.sampled_from([0.3, 0.9]))
def test_contraction(seed, gamma):
    rng = np.random.default_rng(seed)
    m = random_mdp(rng, 5, 3)
    v, w = rng.normal(scale=5, size=(2, 5))
    lhs = np.abs(bellman_optimality(m, v, gamma) - bellman_optimality(m, w, gamma)).max()
    assert lhs <= gamma * np.abs(v - w).max() + 1e-12


def test_value_iteration_decays_geometrically():
    m = random_mdp(np.random.default_rng(3), 6, 3)
    gamma = 0.8
    v_star = policy_iteration_discounted(m, gamma).value
    v = np.zeros(6)
    for _ in range(40):
        nxt = bellman_optimality(m, v, gamma)
        assert np.abs(nxt - v_star).max() <= gamma * np.abs(v - v_star).max() + 1e-12
        v = nxt


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_average_pi_matches_enumeration(seed):
    m = random_unichain_mdp(np.random.default_rng(seed), 4, 2)
    res = policy_iteration_average(m)
    assert res.value[0] == pytest.approx(_enumerated_gain(m), abs=1e-9)
    gain_set = set(n_discount_optimal_sets(m, 0)[1].policies)
    assert res.policy_set() == gain_set


def test_solve_dispatch():
    assert solve(puterman3(), "discounted", gamma=0.5)[0].policy_set() == {BLUE}
    assert len(solve(puterman3(), "ndiscount", n=1)) == 3
    with pytest.raises(ValidationError):
        solve(puterman3(), "discounted")
    with pytest.raises(ValidationError):
        solve(puterman3(), "hyperbolic")
