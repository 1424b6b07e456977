"""Optimal policies under discounted, average, total and n-discount criteria,
and empirical estimation of the Blackwell discount factor."""
from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .chains import MultichainError, classify_states
from .evaluation import (discounted_values, laurent_coefficients, total_values,
                         DivergenceError)
from .mdp import (Mdp, ValidationError, deterministic_chain,
                  enumerate_deterministic_policies, max_enum)

log = logging.getLogger(__name__)

CMP_TOL = 1e-9
GAMMA_HI = 1.0 - 1e-6


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimalityResult:
    """Optimal value and optimal deterministic policy set for one criterion.

    The set is either a product of per-state ``action_sets`` (discounted,
    average, total solvers) or an explicit tuple of ``policies`` (enumeration).
    """

    criterion: str
    parameter: Optional[float]
    value: np.ndarray
    action_sets: Optional[tuple] = None
    policies: Optional[tuple] = None
    iterations: int = 0
    residual: float = 0.0
    notes: tuple = ()

    def set_size(self) -> int:
        if self.policies is not None:
            return len(self.policies)
        return int(np.prod([len(a) for a in self.action_sets], dtype=object))

    def policy_set(self, cap: Optional[int] = None) -> frozenset:
        if self.policies is not None:
            return frozenset(self.policies)
        cap = max_enum() if cap is None else cap
        if self.set_size() > cap:
            raise ValidationError(f"optimal set has {self.set_size()} policies (cap {cap})")
        return frozenset(itertools.product(*self.action_sets))

    def first_policy(self) -> tuple:
        if self.policies is not None:
            return self.policies[0]
        return tuple(a[0] for a in self.action_sets)

    def to_dict(self) -> dict:
        d = {"criterion": self.criterion, "parameter": self.parameter,
             "optimal_value": np.atleast_1d(self.value).tolist(),
             "iterations": self.iterations, "residual": self.residual,
             "set_size": self.set_size()}
        if self.action_sets is not None:
            d["action_sets"] = [list(a) for a in self.action_sets]
        if self.set_size() <= 10_000:
            d["policies"] = [list(p) for p in sorted(self.policy_set())]
        if self.notes:
            d["notes"] = list(self.notes)
        return d


def _masked(mdp: Mdp, q: np.ndarray) -> np.ndarray:
    return np.where(mdp.available, q, -np.inf)


def bellman_optimality(mdp: Mdp, v: np.ndarray, gamma: float) -> np.ndarray:
    """``max_a r(s,a) + gamma sum_s' p(s'|s,a) v(s')``; gamma = 1 gives the average-reward operator."""
    return _masked(mdp, mdp.reward + gamma * (mdp.transition @ v)).max(axis=1)


def _argmax_sets(q: np.ndarray, tol: float) -> tuple:
    best = q.max(axis=1)
    scale = max(1.0, float(np.abs(best[np.isfinite(best)]).max()))
    keep = q >= (best - tol * scale)[:, None]
    return tuple(tuple(int(a) for a in np.flatnonzero(row)) for row in keep)


def _first_actions(mdp: Mdp) -> np.ndarray:
    return np.argmax(mdp.available, axis=1)


# --- discounted -----------------------------------------------------------------

def value_iteration_discounted(mdp: Mdp, gamma: float, tol: float = 1e-10,
                               max_iters: int = 1_000_000, v0=None) -> OptimalityResult:
    """Iterate the optimality operator until successive iterates differ by <= tol."""
    if not 0.0 <= gamma < 1.0:
        raise ValidationError("gamma must lie in [0, 1)")
    if tol <= 0:
        raise ValidationError("tol must be positive")
    v = np.zeros(mdp.num_states) if v0 is None else np.asarray(v0, dtype=float)
    for k in range(1, max_iters + 1):
        v_new = bellman_optimality(mdp, v, gamma)
        diff = float(np.abs(v_new - v).max())
        v = v_new
        if diff <= tol:
            break
    else:
        raise ConvergenceError(f"value iteration did not converge in {max_iters} sweeps")
    q = _masked(mdp, mdp.reward + gamma * (mdp.transition @ v))
    greedy = tuple(int(a) for a in np.argmax(q, axis=1))
    residual = float(np.abs(q.max(axis=1) - v).max())
    return OptimalityResult("discounted", gamma, v, action_sets=tuple((a,) for a in greedy),
                            iterations=k, residual=residual)


def _discounted_eval(mdp: Mdp, actions: np.ndarray, gamma: float) -> tuple:
    """Values split as ``v = c / (1 - gamma) + u`` with a constant ``c``.

    Since ``(I - gamma P) 1 = (1 - gamma) 1`` the split is exact for any c;
    choosing c near the gain keeps u of bias size, so advantages stay accurate
    when gamma is close to 1 and v itself is huge.
    """
    chain = deterministic_chain(mdp, actions)
    rough = discounted_values(chain, gamma)
    c = (1.0 - gamma) * float(np.median(rough))
    lhs = np.eye(chain.num_states) - gamma * chain.p_pi
    return c, np.linalg.solve(lhs, chain.r_pi - c)


def policy_iteration_discounted(mdp: Mdp, gamma: float, tol: float = CMP_TOL,
                                initial: Optional[Sequence[int]] = None,
                                max_iters: int = 10_000) -> OptimalityResult:
    """Howard policy iteration; the returned set is the full argmax set.

    Ties are judged on advantages with tolerance ``tol`` relative to the
    magnitude of the offset-free values; the current action is kept whenever
    it is within tolerance of the best one, which rules out cycling.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValidationError("gamma must lie in [0, 1)")
    actions = _first_actions(mdp) if initial is None else np.array(initial, dtype=int)
    idx = np.arange(mdp.num_states)
    for k in range(1, max_iters + 1):
        c, u = _discounted_eval(mdp, actions, gamma)
        adv = _masked(mdp, mdp.reward - c + gamma * (mdp.transition @ u) - u[:, None])
        best = adv.max(axis=1)
        scale = max(1.0, float(np.abs(u).max()), float(np.abs(mdp.reward).max()))
        current_ok = adv[idx, actions] >= best - tol * scale
        if current_ok.all():
            break
        actions = np.where(current_ok, actions, np.argmax(adv, axis=1))
    else:
        raise ConvergenceError("policy iteration did not terminate")
    keep = adv >= (best - tol * scale)[:, None]
    sets = tuple(tuple(int(a) for a in np.flatnonzero(row)) for row in keep)
    v = c / (1.0 - gamma) + u
    return OptimalityResult("discounted", gamma, v, action_sets=sets,
                            iterations=k, residual=float(np.abs(best).max()))


# --- average reward ---------------------------------------------------------------

def _gain_and_bias(mdp: Mdp, actions) -> tuple:
    chain = deterministic_chain(mdp, actions)
    sc = classify_states(chain)
    lc = laurent_coefficients(chain, 0)
    if sc.num_recurrent_classes > 1:
        gains = [lc.gain[c[0]] for c in sc.classes()]
        if max(gains) - min(gains) > CMP_TOL * max(1.0, max(abs(g) for g in gains)):
            raise MultichainError(f"policy {tuple(int(a) for a in actions)} has recurrent "
                                  f"classes with distinct gains {gains}")
    return lc.gain, lc.bias


def policy_iteration_average(mdp: Mdp, tol: float = CMP_TOL,
                             initial: Optional[Sequence[int]] = None,
                             max_iters: int = 10_000) -> OptimalityResult:
    """Gain-optimal policy iteration for unichain MDPs.

    Improvement is lexicographic: first on ``P g`` (flat for unichain models),
    then on ``r + P h`` with h the bias, keeping the current action on ties.
    The returned action sets are the actions conserving the optimal (g, h).
    """
    actions = _first_actions(mdp) if initial is None else np.array(initial, dtype=int)
    idx = np.arange(mdp.num_states)
    for k in range(1, max_iters + 1):
        g, h = _gain_and_bias(mdp, actions)
        scale = max(1.0, float(np.abs(h).max()), float(np.abs(g).max()))
        stage1 = _masked(mdp, mdp.transition @ g)
        ok1 = stage1 >= stage1.max(axis=1, keepdims=True) - tol * scale
        stage2 = np.where(ok1, mdp.reward + mdp.transition @ h, -np.inf)
        best = stage2.max(axis=1)
        current_ok = ok1[idx, actions] & (stage2[idx, actions] >= best - tol * scale)
        if current_ok.all():
            break
        actions = np.where(current_ok, actions, np.argmax(stage2, axis=1))
    else:
        raise ConvergenceError("average-reward policy iteration did not terminate")
    sets = _argmax_sets(stage2, tol)
    residual = float(np.abs(best - (g + h)).max())
    return OptimalityResult("gain", None, np.array([g[0]]) if np.ptp(g) < 1e-9 else g,
                            action_sets=sets, iterations=k, residual=residual,
                            notes=("set = actions conserving optimal gain and bias",))


def relative_value_iteration(mdp: Mdp, s_ref: int = 0, tol: float = 1e-10,
                             max_iters: int = 200_000, damping: Optional[float] = None,
                             ) -> OptimalityResult:
    """Relative VI: ``v <- B_g v - (B_g v)(s_ref)``, stopped on the span of ``B_g v - v``.

    ``damping=kappa`` applies the gain-preserving transform
    ``P <- (1 - kappa) I + kappa P`` (rewards scaled by kappa, gain rescaled back).
    """
    model = mdp
    if damping is not None:
        if not 0.0 < damping < 1.0:
            raise ValidationError("damping must lie in (0, 1)")
        eye = np.eye(mdp.num_states)[:, None, :]
        model = mdp.replace(transition=(1 - damping) * eye * mdp.available[:, :, None]
                            + damping * mdp.transition,
                            reward=damping * mdp.reward, reward_triple=None)
    v = np.zeros(mdp.num_states)
    for k in range(1, max_iters + 1):
        w = bellman_optimality(model, v, 1.0)
        delta = w - v
        span = float(delta.max() - delta.min())
        g = float(w[s_ref] - v[s_ref])
        v = w - w[s_ref]
        if span <= tol:
            break
    else:
        raise ConvergenceError(
            f"relative VI did not converge in {max_iters} sweeps (span {span:.3g}); "
            "the model may be periodic, try damping=0.99")
    if damping is not None:
        g /= damping
    q = _masked(model, model.reward + model.transition @ v)
    return OptimalityResult("gain", None, np.array([g]), action_sets=_argmax_sets(q, 1e-8),
                            iterations=k, residual=span)


# --- total reward -----------------------------------------------------------------

def absorbing_zero_states(mdp: Mdp) -> np.ndarray:
    """States where every available action is a zero-reward self-loop."""
    n = mdp.num_states
    out = []
    for s in range(n):
        acts = mdp.actions(s)
        if all(mdp.transition[s, a, s] == 1.0 and mdp.reward[s, a] == 0.0 for a in acts):
            out.append(s)
    return np.array(out, dtype=int)


def proper_policy(mdp: Mdp, targets: np.ndarray) -> np.ndarray:
    """A policy reaching ``targets`` with probability one, built by backward attraction."""
    n = mdp.num_states
    reached = np.zeros(n, dtype=bool)
    reached[targets] = True
    actions = _first_actions(mdp).copy()
    changed = True
    while changed:
        changed = False
        for s in np.flatnonzero(~reached):
            for a in mdp.actions(s):
                if (mdp.transition[s, a] * reached).sum() > 0:
                    actions[s] = a
                    reached[s] = True
                    changed = True
                    break
    if not reached.all():
        raise ValidationError(f"states {np.flatnonzero(~reached).tolist()} cannot reach a terminal state")
    return actions


def policy_iteration_total(mdp: Mdp, tol: float = CMP_TOL,
                           initial: Optional[Sequence[int]] = None,
                           max_iters: int = 10_000) -> OptimalityResult:
    """Total-reward policy iteration for models with zero-reward absorbing states.

    Starts from a proper policy; improper policies are assumed to earn -inf.
    """
    targets = absorbing_zero_states(mdp)
    if targets.size == 0:
        raise ValidationError("total-reward criterion needs a zero-reward absorbing state")
    actions = proper_policy(mdp, targets) if initial is None else np.array(initial, dtype=int)
    idx = np.arange(mdp.num_states)
    for k in range(1, max_iters + 1):
        try:
            v = total_values(deterministic_chain(mdp, actions))
        except (DivergenceError, np.linalg.LinAlgError) as exc:
            raise ValidationError(f"policy {actions.tolist()} is improper: {exc}") from None
        q = _masked(mdp, mdp.reward + mdp.transition @ v)
        best = q.max(axis=1)
        scale = max(1.0, float(np.abs(best).max()))
        current_ok = q[idx, actions] >= best - tol * scale
        if current_ok.all():
            break
        actions = np.where(current_ok, actions, np.argmax(q, axis=1))
    else:
        raise ConvergenceError("total-reward policy iteration did not terminate")
    return OptimalityResult("total", None, v, action_sets=_argmax_sets(q, tol),
                            iterations=k, residual=float(np.abs(best - v).max()))


# --- n-discount optimality by enumeration -----------------------------------------

def laurent_table(mdp: Mdp, n_max: int, require_unichain: bool = True,
                  cap: Optional[int] = None) -> tuple:
    """Coefficients (v_{-1}, ..., v_{n_max}) of every deterministic policy.

    Returns ``(policies, table)`` with table shape (#policies, n_max + 2, |S|).
    """
    policies = list(enumerate_deterministic_policies(mdp, cap))
    table = np.empty((len(policies), n_max + 2, mdp.num_states))
    for i, actions in enumerate(policies):
        chain = deterministic_chain(mdp, actions)
        if require_unichain and classify_states(chain).num_recurrent_classes != 1:
            raise MultichainError(f"policy {actions} induces a multichain chain")
        table[i] = laurent_coefficients(chain, max(n_max, 0)).as_array()[: n_max + 2]
    return policies, table


def n_discount_optimal_sets(mdp: Mdp, n_max: int, tol: float = CMP_TOL,
                            require_unichain: bool = True,
                            cap: Optional[int] = None) -> list:
    """Brute-force n-discount optimal sets for n = -1 .. n_max.

    Each level keeps the policies of the previous level whose n-th coefficient
    attains the state-wise maximum over that level.
    """
    if n_max < -1:
        raise ValidationError("n_max must be >= -1")
    policies, table = laurent_table(mdp, max(n_max, 0), require_unichain, cap)
    keep = np.arange(len(policies))
    out = []
    for level in range(n_max + 2):
        vals = table[keep, level]
        best = vals.max(axis=0)
        scale = max(1.0, float(np.abs(best).max()))
        ok = (vals >= best - tol * scale).all(axis=1)
        keep = keep[ok]
        out.append(OptimalityResult("n-discount", level - 1, best,
                                    policies=tuple(policies[i] for i in keep)))
    return out


# --- Blackwell discount factor ------------------------------------------------------

@dataclass(frozen=True)
class BlackwellEstimate:
    gamma_bw_hat: float
    bracket: tuple
    blackwell_sets: tuple            # per-state optimal actions at gamma_hi
    sweep_log: tuple                 # (gamma, set id) in increasing gamma
    warnings: tuple = ()
    distinct_sets: tuple = ()        # set id -> per-state action sets

    @property
    def blackwell_set(self) -> frozenset:
        return frozenset(itertools.product(*self.blackwell_sets))

    def to_dict(self) -> dict:
        return {"gamma_bw_hat": self.gamma_bw_hat, "bracket": list(self.bracket),
                "blackwell_action_sets": [list(a) for a in self.blackwell_sets],
                "sweep_log": [[g, i] for g, i in self.sweep_log],
                "num_distinct_sets": len(self.distinct_sets),
                "warnings": list(self.warnings)}


def blackwell_gamma(mdp: Mdp, tol: float = 1e-3, grid_size: int = 40,
                    gamma_hi: float = GAMMA_HI, cmp_tol: float = CMP_TOL,
                    jobs: int = 1) -> BlackwellEstimate:
    """Smallest gamma above which the discounted argmax set stays equal to the
    argmax set at ``gamma_hi``, located by a grid sweep then bisection."""
    if tol <= 0:
        raise ValidationError("tol must be positive")
    if grid_size < 1:
        raise ValidationError("grid_size must be >= 1")

    def argmax_sets(gamma, t=cmp_tol):
        return policy_iteration_discounted(mdp, gamma, tol=t).action_sets

    ref = argmax_sets(gamma_hi)
    warnings = []
    for factor in (10.0, 0.1):
        if argmax_sets(gamma_hi, cmp_tol * factor) != ref:
            warnings.append(f"argmax set at gamma_hi changes with tolerance x{factor}; "
                            "comparison tolerance may need widening")
    grid = [gamma_hi * i / grid_size for i in range(grid_size)]
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            sets = list(pool.map(argmax_sets, grid))
    else:
        sets = [argmax_sets(g) for g in grid]
    distinct: list = []
    log_entries = []

    def set_id(s):
        if s not in distinct:
            distinct.append(s)
        return distinct.index(s)

    set_id(ref)
    for g, s in zip(grid, sets):
        log_entries.append((g, set_id(s)))
    mismatches = [i for i, s in enumerate(sets) if s != ref]
    if not mismatches:
        lo = hi = 0.0
    else:
        i = mismatches[-1]
        lo = grid[i]
        hi = grid[i + 1] if i + 1 < len(grid) else gamma_hi
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            s = argmax_sets(mid)
            log_entries.append((mid, set_id(s)))
            if s == ref:
                hi = mid
            else:
                lo = mid
    log_entries.sort()
    return BlackwellEstimate(hi, (lo, hi), ref, tuple(log_entries), tuple(warnings),
                             tuple(distinct))


def misspecification_bound_check(mdp: Mdp, gamma: float, gamma_bw: float) -> tuple:
    """``(||v*_{gamma_bw} - v*_gamma||_inf, (gamma_bw - gamma) r_max / ((1-gamma)(1-gamma_bw)))``."""
    if not 0.0 <= gamma <= gamma_bw < 1.0:
        raise ValidationError("need 0 <= gamma <= gamma_bw < 1")
    v_bw = policy_iteration_discounted(mdp, gamma_bw).value
    v_g = policy_iteration_discounted(mdp, gamma).value
    lhs = float(np.abs(v_bw - v_g).max())
    rhs = (gamma_bw - gamma) * mdp.r_max / ((1.0 - gamma) * (1.0 - gamma_bw))
    return lhs, rhs


def solve(mdp: Mdp, criterion: str, gamma: Optional[float] = None, n: int = 0,
          tol: float = CMP_TOL) -> list:
    """Dispatch used by the command line; always returns a list of results."""
    if criterion == "discounted":
        if gamma is None:
            raise ValidationError("--gamma is required for the discounted criterion")
        return [policy_iteration_discounted(mdp, gamma, tol)]
    if criterion == "gain":
        return [policy_iteration_average(mdp, tol)]
    if criterion == "total":
        return [policy_iteration_total(mdp, tol)]
    if criterion == "ndiscount":
        return n_discount_optimal_sets(mdp, n, tol)
    raise ValidationError(f"unknown criterion {criterion!r}")
