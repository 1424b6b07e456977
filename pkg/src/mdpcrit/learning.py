"""Tabular Q-learning under the discounted, average and total reward criteria,
and the two training schemes for episodic tasks."""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy.sparse import csr_matrix

from .mdp import Mdp, ValidationError
from .transform import RstModel, ZratModel, zrat_to_rst

_BATCH = 1 << 16


@dataclass(frozen=True)
class LearnerConfig:
    alpha: float = 0.1
    q_init: Optional[float] = None
    epsilon: float = 0.0
    s_ref: Optional[int] = None
    max_steps: int = 100_000
    episode_cap: int = 1000
    seed: int = 0
    eval_every: int = 5000
    eval_horizon: Optional[int] = None   # defaults to episode_cap
    n_last: int = 10

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValidationError("alpha must lie in (0, 1]")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValidationError("epsilon must lie in [0, 1]")
        if self.episode_cap < 1 or self.max_steps < 1 or self.eval_every < 1:
            raise ValidationError("episode_cap, max_steps and eval_every must be >= 1")


@dataclass(frozen=True)
class LearningCurve:
    steps: tuple
    metric: tuple                      # exact finite-horizon average reward of the greedy policy
    gain_estimate: Optional[tuple] = None
    returns: tuple = ()                # training return of every completed experiment-episode
    horizon: int = 0

    @property
    def final_metric(self) -> float:
        return self.metric[-1]

    def metric_at(self, step: int) -> float:
        """Metric at the last checkpoint not after ``step``."""
        i = bisect.bisect_right(self.steps, step) - 1
        if i < 0:
            raise ValidationError(f"no checkpoint at or before step {step}")
        return self.metric[i]

    def to_csv(self) -> str:
        head = "steps,metric" + (",gain_estimate" if self.gain_estimate else "")
        rows = [head]
        for i, (s, m) in enumerate(zip(self.steps, self.metric)):
            row = f"{s},{m!r}"
            if self.gain_estimate:
                row += f",{self.gain_estimate[i]!r}"
            rows.append(row)
        return "\n".join(rows) + "\n"


def final_metric(returns: Sequence[float], horizon: int, n_last: int) -> float:
    """Mean of the last ``n_last`` experiment-episode returns over ``horizon + 1`` steps."""
    if len(returns) == 0:
        raise ValidationError("no returns")
    if not 1 <= n_last <= len(returns):
        raise ValidationError("need 1 <= n_last <= number of returns")
    return float(np.mean(returns[-n_last:])) / (horizon + 1)


# --- exact metric ------------------------------------------------------------------

def greedy_actions(q: np.ndarray, mdp: Mdp) -> np.ndarray:
    """Greedy action of ``q`` per state of ``mdp`` (lowest index on ties).

    States whose available actions all lie outside q's columns (the reset
    state of a converted model) take their first available action.
    """
    out = np.empty(mdp.num_states, dtype=int)
    for s in range(mdp.num_states):
        acts = [a for a in mdp.actions(s) if a < q.shape[1]]
        if not acts or s >= q.shape[0]:
            out[s] = mdp.actions(s)[0]
        else:
            out[s] = max(acts, key=lambda a: (q[s, a], -a))
    return out


def finite_horizon_average(mdp: Mdp, actions: Sequence[int], horizon: int,
                           start: Optional[np.ndarray] = None) -> float:
    """``E[sum_{t=0}^{H} R_{t+1}] / (H + 1)`` from the isd, by propagating the state distribution."""
    idx = np.arange(mdp.num_states)
    actions = np.asarray(actions)
    p = csr_matrix(mdp.transition[idx, actions])
    r = mdp.reward[idx, actions]
    d = mdp.isd.copy() if start is None else np.asarray(start, dtype=float)
    pt = p.T.tocsr()
    total = 0.0
    for _ in range(horizon + 1):
        total += d @ r
        d = pt @ d
    return float(total / (horizon + 1))


# --- simulator tables -----------------------------------------------------------------

class _Sim:
    """Per-(s, a) successor lists with cumulative probabilities and rewards."""

    def __init__(self, mdp: Mdp):
        n_s, n_a = mdp.num_states, mdp.num_actions
        self.nxt = [[None] * n_a for _ in range(n_s)]
        self.cum = [[None] * n_a for _ in range(n_s)]
        self.rew = [[None] * n_a for _ in range(n_s)]
        for s in range(n_s):
            for a in mdp.actions(s):
                succ = np.flatnonzero(mdp.transition[s, a] > 0)
                probs = mdp.transition[s, a, succ]
                self.nxt[s][a] = succ.tolist()
                self.cum[s][a] = np.cumsum(probs).tolist()
                if mdp.reward_triple is not None:
                    self.rew[s][a] = mdp.reward_triple[s, a, succ].tolist()
                else:
                    self.rew[s][a] = [float(mdp.reward[s, a])] * len(succ)
        self.actions = [mdp.actions(s).tolist() for s in range(n_s)]
        isd_support = np.flatnonzero(mdp.isd > 0)
        self.isd_states = isd_support.tolist()
        self.isd_cum = np.cumsum(mdp.isd[isd_support]).tolist()


class _Uniforms:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.buf = []
        self.i = 0

    def __call__(self) -> float:
        if self.i >= len(self.buf):
            self.buf = self.rng.random(_BATCH).tolist()
            self.i = 0
        u = self.buf[self.i]
        self.i += 1
        return u


def _pick(cum: list, u: float) -> int:
    k = bisect.bisect_right(cum, u)
    return min(k, len(cum) - 1)


def _run(mdp: Mdp, kind: str, gamma: float, config: LearnerConfig, q_init: float,
         terminal: Optional[int], eval_mdp: Mdp, s_ref: Optional[int]):
    sim = _Sim(mdp)
    rng = np.random.default_rng(config.seed)
    uniform = _Uniforms(rng)
    n_s, n_a = mdp.num_states, mdp.num_actions
    q = [[(q_init if mdp.available[s, a] else -math.inf) for a in range(n_a)]
         for s in range(n_s)]
    if terminal is not None:
        q[terminal] = [0.0 if mdp.available[terminal, a] else -math.inf for a in range(n_a)]
    alpha, eps = config.alpha, config.epsilon
    horizon = config.eval_horizon or config.episode_cap
    steps_log, metric_log, gain_log, returns = [], [], [], []

    def start_state():
        return sim.isd_states[_pick(sim.isd_cum, uniform())]

    def checkpoint(t):
        qa = np.array(q)
        acts = greedy_actions(qa, eval_mdp)
        steps_log.append(t)
        metric_log.append(finite_horizon_average(eval_mdp, acts, horizon))
        if kind == "b":
            gain_log.append(max(q[s_ref]))

    s = start_state()
    ep_t, ep_ret = 0, 0.0
    for t in range(1, config.max_steps + 1):
        row = q[s]
        acts = sim.actions[s]
        if eps > 0.0 and uniform() < eps:
            a = acts[int(uniform() * len(acts)) % len(acts)]
        else:
            a = acts[0]
            best = row[a]
            for b in acts[1:]:
                if row[b] > best:
                    a, best = b, row[b]
        k = _pick(sim.cum[s][a], uniform()) if len(sim.cum[s][a]) > 1 else 0
        s2 = sim.nxt[s][a][k]
        r = sim.rew[s][a][k]
        nxt_best = max(q[s2])
        if kind == "gamma":
            target = r + gamma * nxt_best
        elif kind == "b":
            target = r - max(q[s_ref]) + nxt_best
        else:
            target = r + nxt_best
        row[a] = (1.0 - alpha) * row[a] + alpha * target
        ep_ret += r
        ep_t += 1
        if terminal is not None and s2 == terminal:
            s2 = start_state()          # transported back; not a timestep
        s = s2
        if ep_t >= config.episode_cap:
            returns.append(ep_ret)
            s = start_state()
            ep_t, ep_ret = 0, 0.0
        if t % config.eval_every == 0 or t == config.max_steps:
            checkpoint(t)
    curve = LearningCurve(tuple(steps_log), tuple(metric_log),
                          tuple(gain_log) if kind == "b" else None, tuple(returns), horizon)
    return np.array(q), curve


def _unwrap(model):
    if isinstance(model, ZratModel):
        return model.mdp, model.state
    if isinstance(model, RstModel):
        return model.mdp, None
    return model, None


def q_gamma_learning(model, gamma: float, config: LearnerConfig,
                     eval_mdp: Optional[Mdp] = None) -> tuple:
    """Discounted Q-learning; a ``ZratModel`` is trained with transport back to the isd."""
    if not 0.0 <= gamma < 1.0:
        raise ValidationError("gamma must lie in [0, 1)")
    mdp, terminal = _unwrap(model)
    q0 = config.q_init if config.q_init is not None else mdp.r_max / (1.0 - gamma)
    return _run(mdp, "gamma", gamma, config, q0, terminal, eval_mdp or mdp, None)


def q_b_learning(model, config: LearnerConfig, eval_mdp: Optional[Mdp] = None) -> tuple:
    """Average-reward (relative) Q-learning; returns ``(q, gain_estimate, curve)``."""
    mdp, _ = _unwrap(model)
    if config.s_ref is not None:
        s_ref = config.s_ref
    else:
        s_ref = model.state if isinstance(model, RstModel) else 0
    if not 0 <= s_ref < mdp.num_states:
        raise ValidationError("s_ref out of range")
    q0 = config.q_init if config.q_init is not None else mdp.r_max * _diameter_guess(mdp)
    q, curve = _run(mdp, "b", 1.0, config, q0, None, eval_mdp or mdp, s_ref)
    return q, float(np.max(q[s_ref])), curve


def q_tot_learning(model, config: LearnerConfig, eval_mdp: Optional[Mdp] = None) -> tuple:
    """Undiscounted Q-learning on a terminal-state model."""
    mdp, terminal = _unwrap(model)
    q0 = config.q_init if config.q_init is not None else mdp.r_max * mdp.num_states
    return _run(mdp, "tot", 1.0, config, q0, terminal, eval_mdp or mdp, None)


def _diameter_guess(mdp: Mdp) -> int:
    """Longest BFS distance on the union graph from the isd support (at least 1)."""
    adj = ((mdp.transition > 0) & mdp.available[:, :, None]).any(axis=1)
    dist = np.full(mdp.num_states, -1)
    frontier = np.flatnonzero(mdp.isd > 0)
    dist[frontier] = 0
    d = 0
    while frontier.size:
        d += 1
        nxt = np.flatnonzero(adj[frontier].any(axis=0) & (dist < 0))
        dist[nxt] = d
        frontier = nxt
    return max(1, int(dist.max()))


@dataclass(frozen=True)
class SchemeComparison:
    scheme_a: LearningCurve      # total-reward learning on the terminal-state model
    scheme_b: LearningCurve      # average-reward learning on the resetting model
    q_a: np.ndarray
    q_b: np.ndarray
    gain_estimate: float


def run_scheme_comparison(zrat: ZratModel, rst: RstModel, config: LearnerConfig,
                          q_init_a: Optional[float] = None,
                          q_init_b: Optional[float] = None) -> SchemeComparison:
    """Train both schemes with identical seed, learning rate and episode caps;
    both curves are measured on the resetting model."""
    expected = zrat_to_rst(zrat, require_inevitable=False)
    if expected.to_json() != rst.to_json():
        raise ValidationError("the resetting model is not the conversion of the terminal model")
    cfg_a = replace(config, q_init=q_init_a, s_ref=None)
    cfg_b = replace(config, q_init=q_init_b,
                    s_ref=rst.state if config.s_ref is None else config.s_ref)
    q_a, curve_a = q_tot_learning(zrat, cfg_a, eval_mdp=rst.mdp)
    q_b, gain, curve_b = q_b_learning(rst, cfg_b, eval_mdp=rst.mdp)
    return SchemeComparison(curve_a, curve_b, q_a, q_b, gain)


def sampled_returns(mdp: Mdp, actions: Sequence[int], horizon: int, n_episodes: int,
                    seed: int) -> list:
    """Returns of ``n_episodes`` rollouts of ``horizon + 1`` steps from the isd."""
    sim = _Sim(mdp)
    uniform = _Uniforms(np.random.default_rng(seed))
    out = []
    for _ in range(n_episodes):
        s = sim.isd_states[_pick(sim.isd_cum, uniform())]
        ret = 0.0
        for _ in range(horizon + 1):
            a = int(actions[s])
            k = _pick(sim.cum[s][a], uniform())
            ret += sim.rew[s][a][k]
            s = sim.nxt[s][a][k]
        out.append(ret)
    return out
