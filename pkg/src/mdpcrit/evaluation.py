"""Exact evaluation of a fixed stationary policy under every criterion.

All quantities are computed by dense linear algebra on the induced chain.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .chains import MultichainError, classify_states, limiting_matrix, stationary_distribution
from .mdp import InducedChain, Mdp, PolicyTable, ValidationError, induce_chain

COND_LIMIT = 1e12


class DivergenceError(ValueError):
    """Raised when the total reward of a chain is not finite."""


class IllConditionedError(np.linalg.LinAlgError):
    pass


def _check_gamma(gamma: float) -> None:
    if not 0.0 <= gamma < 1.0:
        raise ValidationError(f"discount factor must lie in [0, 1), got {gamma}")


def discounted_values(chain: InducedChain, gamma: float) -> np.ndarray:
    """Solve ``(I - gamma P) v = r``."""
    _check_gamma(gamma)
    n = chain.num_states
    return np.linalg.solve(np.eye(n) - gamma * chain.p_pi, chain.r_pi)


def discounted_q(mdp: Mdp, policy: PolicyTable, gamma: float) -> np.ndarray:
    """Action values; entries for unavailable actions are ``-inf``."""
    v = discounted_values(induce_chain(mdp, policy), gamma)
    q = mdp.reward + gamma * mdp.transition @ v
    return np.where(mdp.available, q, -np.inf)


def total_values(chain: InducedChain) -> np.ndarray:
    """Expected total reward; finite only when recurrent states earn nothing."""
    sc = classify_states(chain)
    rec = np.array(sc.recurrent)
    if np.any(np.abs(chain.r_pi[rec]) > 0):
        s = int(np.flatnonzero(rec & (np.abs(chain.r_pi) > 0))[0])
        raise DivergenceError(f"recurrent state {s} has nonzero reward {chain.r_pi[s]}; "
                              "total reward diverges")
    v = np.zeros(chain.num_states)
    t = np.flatnonzero(~rec)
    if t.size:
        q = chain.p_pi[np.ix_(t, t)]
        v[t] = np.linalg.solve(np.eye(t.size) - q, chain.r_pi[t])
    return v


def gain(chain: InducedChain) -> np.ndarray:
    return limiting_matrix(chain) @ chain.r_pi


@dataclass(frozen=True)
class DeviationMatrix:
    d: np.ndarray
    pstar: np.ndarray


def deviation_matrix(chain: InducedChain) -> DeviationMatrix:
    """``D = (I - P + P*)^{-1} - P*``."""
    pstar = limiting_matrix(chain)
    n = chain.num_states
    fundamental = np.eye(n) - chain.p_pi + pstar
    cond = np.linalg.cond(fundamental)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise IllConditionedError(f"I - P + P* has condition number {cond:.3g}")
    return DeviationMatrix(np.linalg.inv(fundamental) - pstar, pstar)


@dataclass(frozen=True)
class LaurentCoefficients:
    """``coeffs[0]`` is the gain v_{-1}, ``coeffs[1]`` the bias v_0, then v_1, ..."""

    coeffs: tuple

    @property
    def n_max(self) -> int:
        return len(self.coeffs) - 2

    @property
    def gain(self) -> np.ndarray:
        return self.coeffs[0]

    @property
    def bias(self) -> np.ndarray:
        return self.coeffs[1]

    def v(self, n: int) -> np.ndarray:
        return self.coeffs[n + 1]

    def as_array(self) -> np.ndarray:
        return np.stack(self.coeffs)


def laurent_coefficients(chain: InducedChain, n_max: int,
                         dev: Optional[DeviationMatrix] = None) -> LaurentCoefficients:
    if n_max < 0:
        raise ValidationError("n_max must be >= 0")
    dev = dev or deviation_matrix(chain)
    coeffs = [dev.pstar @ chain.r_pi, dev.d @ chain.r_pi]
    for _ in range(n_max):
        coeffs.append(-dev.d @ coeffs[-1])
    return LaurentCoefficients(tuple(coeffs))


def nested_equation_residuals(chain: InducedChain, lc: LaurentCoefficients) -> np.ndarray:
    """Sup-norm residual of each nested coefficient equation, starting with v_{-1} = P v_{-1}."""
    p, r = chain.p_pi, chain.r_pi
    c = lc.coeffs
    res = [np.abs(c[0] - p @ c[0]).max(), np.abs(c[1] - (r - c[0] + p @ c[1])).max()]
    for k in range(2, len(c)):
        res.append(np.abs(c[k] - (-c[k - 1] + p @ c[k])).max())
    return np.array(res)


def laurent_reconstruction(lc: LaurentCoefficients, gamma: float, n_terms: int) -> np.ndarray:
    """Partial sum of the full expansion using v_{-1}, v_0 and v_1..v_{n_terms}."""
    if not 0.0 < gamma < 1.0:
        raise ValidationError("reconstruction needs 0 < gamma < 1")
    if n_terms > lc.n_max:
        raise ValidationError(f"only {lc.n_max} higher coefficients available")
    rho = (1.0 - gamma) / gamma
    total = gamma / (1.0 - gamma) * lc.gain + lc.bias
    for n in range(1, n_terms + 1):
        total = total + rho**n * lc.v(n)
    return total / gamma


def truncation_residual(chain: InducedChain, gamma: float) -> np.ndarray:
    """``v_gamma - v_{-1}/(1-gamma) - v_0``."""
    v = discounted_values(chain, gamma)
    lc = laurent_coefficients(chain, 0)
    return v - lc.gain / (1.0 - gamma) - lc.bias


def relative_values(chain: InducedChain, ref: int) -> np.ndarray:
    """Bias shifted so that the reference state has relative value zero."""
    b = laurent_coefficients(chain, 0).bias
    return b - b[ref]


@dataclass(frozen=True)
class GainDiscountResidual:
    gamma: float
    weighted: float   # |(1-g) sum_s p*(s|s0) v_g(s) - v_gain(s0)|, zero for every gamma
    scaled: float     # |(1-g) v_g(s0) - v_gain(s0)|, vanishes only as gamma -> 1


def gain_from_discounted(chain: InducedChain, gammas: Sequence[float], s0: int = 0) -> list:
    pstar = stationary_distribution(chain, s0)
    g = float(pstar @ chain.r_pi)
    out = []
    for gamma in gammas:
        v = discounted_values(chain, gamma)
        out.append(GainDiscountResidual(
            float(gamma),
            abs((1.0 - gamma) * float(pstar @ v) - g),
            abs((1.0 - gamma) * float(v[s0]) - g)))
    return out


def improper_discounted_matrix(chain: InducedChain, gamma: float) -> np.ndarray:
    _check_gamma(gamma)
    n = chain.num_states
    return np.linalg.inv(np.eye(n) - gamma * chain.p_pi)


def effective_horizon(gamma: float, epsilon: float, r_max: float) -> int:
    """Smallest tau with ``gamma**tau * r_max / (1 - gamma) <= epsilon``."""
    if not 0.0 < gamma < 1.0:
        raise ValidationError("effective horizon needs 0 < gamma < 1")
    if epsilon <= 0 or r_max <= 0:
        raise ValidationError("epsilon and r_max must be positive")
    ratio = (1.0 - gamma) * epsilon / r_max
    if ratio >= 1.0:
        raise ValidationError("(1 - gamma) * epsilon / r_max must be < 1")
    x = math.log(ratio) / math.log(gamma)
    nearest = round(x)
    if abs(x - nearest) < 1e-9:
        return int(nearest)
    return int(math.ceil(x))


@dataclass(frozen=True)
class MonteCarloEstimate:
    mean: np.ndarray
    stderr: np.ndarray
    n_rollouts: int


def geometric_termination_estimate(mdp: Mdp, policy: PolicyTable, gamma: float,
                                   n_rollouts: int, seed: int,
                                   starts: Optional[Sequence[int]] = None) -> MonteCarloEstimate:
    """Mean undiscounted return over horizons T ~ Geometric(1 - gamma), per start state.

    All rollouts of a start state advance together, one vectorised step at a time.
    """
    _check_gamma(gamma)
    if n_rollouts < 1:
        raise ValidationError("n_rollouts must be >= 1")
    rng = np.random.default_rng(seed)
    n_s, n_a = mdp.num_states, mdp.num_actions
    starts = range(n_s) if starts is None else starts
    pi_cdf = np.cumsum(policy.probs, axis=1)
    p_cdf = np.cumsum(mdp.transition, axis=2)
    triple = mdp.reward_triple
    mean = np.full(n_s, np.nan)
    err = np.full(n_s, np.nan)
    for s0 in starts:
        horizon = rng.geometric(1.0 - gamma, size=n_rollouts)
        state = np.full(n_rollouts, s0, dtype=int)
        ret = np.zeros(n_rollouts)
        t = 0
        alive = horizon > t
        while alive.any():
            idx = np.flatnonzero(alive)
            s = state[idx]
            a = (rng.random(idx.size)[:, None] > pi_cdf[s]).sum(axis=1)
            a = np.minimum(a, n_a - 1)
            nxt = (rng.random(idx.size)[:, None] > p_cdf[s, a]).sum(axis=1)
            nxt = np.minimum(nxt, n_s - 1)
            ret[idx] += triple[s, a, nxt] if triple is not None else mdp.reward[s, a]
            state[idx] = nxt
            t += 1
            alive = horizon > t
        mean[s0] = ret.mean()
        err[s0] = ret.std(ddof=1) / math.sqrt(n_rollouts) if n_rollouts > 1 else 0.0
    return MonteCarloEstimate(mean, err, n_rollouts)


# --- parameterised policies and exact gain gradients -------------------------------

class PolicyFeaturizer:
    """Softmax policy over available actions with logits ``theta . phi(s, a)``.

    ``features`` has shape (|S|, |A|, k).
    """

    def __init__(self, features: np.ndarray, available: Optional[np.ndarray] = None):
        self.features = np.asarray(features, dtype=float)
        if self.features.ndim != 3:
            raise ValidationError("features must be |S|x|A|xk")
        n_s, n_a, _ = self.features.shape
        self.available = (np.ones((n_s, n_a), dtype=bool) if available is None
                          else np.asarray(available, dtype=bool))

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    def probs(self, theta: np.ndarray) -> np.ndarray:
        logits = self.features @ np.asarray(theta, dtype=float)
        logits = np.where(self.available, logits, -np.inf)
        logits = logits - logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        return w / w.sum(axis=1, keepdims=True)

    def policy(self, theta: np.ndarray) -> PolicyTable:
        return PolicyTable(self.probs(theta))

    def score(self, theta: np.ndarray) -> np.ndarray:
        """grad log pi(a|s), shape (|S|, |A|, k); zero on unavailable actions."""
        pi = self.probs(theta)
        mean_phi = np.einsum("sa,sak->sk", pi, self.features)
        out = self.features - mean_phi[:, None, :]
        return np.where(self.available[:, :, None], out, 0.0)


def _policy_derivatives(mdp: Mdp, feat: PolicyFeaturizer, theta):
    pi = feat.probs(theta)
    dpi = pi[:, :, None] * feat.score(theta)                      # (S, A, k)
    dp = np.einsum("sak,sat->kst", dpi, mdp.transition)            # (k, S, S)
    dr = np.einsum("sak,sa->ks", dpi, np.where(mdp.available, mdp.reward, 0.0))
    return pi, dpi, dp, dr


def _unichain_pieces(chain: InducedChain):
    if classify_states(chain).num_recurrent_classes != 1:
        raise MultichainError("gain gradient needs a unichain induced chain")
    dev = deviation_matrix(chain)
    return dev.pstar[0], dev.d


def stationary_gradient(mdp: Mdp, feat: PolicyFeaturizer, theta) -> np.ndarray:
    """d p*(s) / d theta_k as a (k, |S|) array, from ``dp*^T = p*^T dP D``."""
    pi, _, dp, _ = _policy_derivatives(mdp, feat, theta)
    pstar, d = _unichain_pieces(induce_chain(mdp, PolicyTable(pi)))
    return np.einsum("s,kst,tu->ku", pstar, dp, d)


def gain_gradient(mdp: Mdp, feat: PolicyFeaturizer, theta) -> np.ndarray:
    """Exact gradient of the (state-independent) gain of a unichain softmax policy."""
    pi, _, dp, dr = _policy_derivatives(mdp, feat, theta)
    chain = induce_chain(mdp, PolicyTable(pi))
    pstar, d = _unichain_pieces(chain)
    dpstar = np.einsum("s,kst,tu->ku", pstar, dp, d)
    return dpstar @ chain.r_pi + dr @ pstar


def policy_gain(mdp: Mdp, feat: PolicyFeaturizer, theta) -> float:
    chain = induce_chain(mdp, feat.policy(theta))
    return float(stationary_distribution(chain) @ chain.r_pi)


def finite_difference_gain_gradient(mdp: Mdp, feat: PolicyFeaturizer, theta,
                                    h: float = 1e-5) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    out = np.zeros_like(theta)
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = h
        out[k] = (policy_gain(mdp, feat, theta + e) - policy_gain(mdp, feat, theta - e)) / (2 * h)
    return out


@dataclass(frozen=True)
class GradientIdentityReport:
    gamma: float
    gradient: np.ndarray          # exact grad v_g
    two_term: np.ndarray          # q-weighted score term + (1-gamma) v grad log p* term
    residual: float               # sup |two_term - gradient|
    transition_sum: np.ndarray    # sum_s sum_s' p*(s) dP(s'|s) v_gamma(s'), no limit taken
    reward_term: np.ndarray       # p*^T grad r_pi; absent from transition_sum

    @property
    def transition_sum_error(self) -> float:
        return float(np.abs(self.transition_sum - self.gradient).max())


def gradient_identity_residual(mdp: Mdp, feat: PolicyFeaturizer, theta,
                               gamma: float) -> GradientIdentityReport:
    """Compare both discounted expressions of the gain gradient with the exact one.

    ``transition_sum`` only reaches the gradient as gamma -> 1 when rewards do
    not depend on the action; otherwise it misses ``reward_term``.
    """
    _check_gamma(gamma)
    pi, dpi, dp, dr = _policy_derivatives(mdp, feat, theta)
    chain = induce_chain(mdp, PolicyTable(pi))
    pstar, d = _unichain_pieces(chain)
    dpstar = np.einsum("s,kst,tu->ku", pstar, dp, d)
    grad = dpstar @ chain.r_pi + dr @ pstar

    v = discounted_values(chain, gamma)
    q = np.where(mdp.available, mdp.reward + gamma * mdp.transition @ v, 0.0)
    first = np.einsum("s,sak,sa->k", pstar, dpi, q)
    # p*(s) grad log p*(s) = grad p*(s); transient states contribute zero
    second = (1.0 - gamma) * dpstar @ v
    two_term = first + second
    transition_sum = np.einsum("s,kst,t->k", pstar, dp, v)
    return GradientIdentityReport(float(gamma), grad, two_term,
                                  float(np.abs(two_term - grad).max()),
                                  transition_sum, dr @ pstar)


def evaluate_all(chain: InducedChain, gamma: Optional[float], n_max: int = 1) -> dict:
    """Every criterion for one chain, keyed for JSON output."""
    lc = laurent_coefficients(chain, n_max)
    out = {"v_gain": lc.gain.tolist(), "v_bias": lc.bias.tolist(),
           "v_n": [lc.v(n).tolist() for n in range(1, n_max + 1)],
           "residuals": {"nested": nested_equation_residuals(chain, lc).tolist()}}
    if gamma is not None:
        v = discounted_values(chain, gamma)
        out["v_gamma"] = v.tolist()
        out["residuals"]["bellman"] = float(np.abs(v - chain.r_pi - gamma * chain.p_pi @ v).max())
        out["residuals"]["truncation"] = (v - lc.gain / (1 - gamma) - lc.bias).tolist()
    try:
        out["v_tot"] = total_values(chain).tolist()
    except DivergenceError:
        out["v_tot"] = None
    return out
