"""Environment generators, a one-step simulator, policy-value landscapes and
Blackwell-discount sweeps over environment families."""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .chains import classify_states, limiting_matrix
from .evaluation import PolicyFeaturizer, discounted_values
from .mdp import Mdp, ValidationError, induce_chain
from .transform import ZratModel, zrat_to_rst


# --- small fixtures -----------------------------------------------------------------

def puterman3() -> Mdp:
    """Three states; at s0 action 0 (red) goes to s1 with reward 1 and action 1
    (blue) goes to s2 with reward 2; s1 moves to s2 with reward 1; s2 is a
    zero-reward self-loop."""
    p = np.zeros((3, 2, 3))
    r = np.zeros((3, 2))
    p[0, 0, 1], r[0, 0] = 1.0, 1.0
    p[0, 1, 2], r[0, 1] = 1.0, 2.0
    p[1, 0, 2], r[1, 0] = 1.0, 1.0
    p[2, 0, 2] = 1.0
    avail = np.array([[1, 1], [1, 0], [1, 0]], dtype=bool)
    return Mdp(p, r, np.array([1.0, 0.0, 0.0]), avail,
               state_labels=("s0", "s1", "s2"), action_labels=("red", "blue"))


def puterman3_zrat() -> ZratModel:
    return ZratModel(puterman3(), 2, 0)


RED = (0, 0, 0)
BLUE = (1, 0, 0)


def loop1(c: float = 3.0) -> Mdp:
    """One state, one action, reward ``c``."""
    return Mdp(np.ones((1, 1, 1)), np.array([[float(c)]]), np.ones(1))


def random_mdp(rng: np.random.Generator, n_states: int, n_actions: int,
               density: float = 0.6, reward_scale: float = 1.0) -> Mdp:
    """Random MDP with sparse-ish rows; every row keeps at least one successor."""
    mask = rng.random((n_states, n_actions, n_states)) < density
    mask[np.arange(n_states)[:, None], np.arange(n_actions)[None, :],
         rng.integers(n_states, size=(n_states, n_actions))] = True
    w = rng.random((n_states, n_actions, n_states)) * mask
    p = w / w.sum(axis=2, keepdims=True)
    r = rng.uniform(-reward_scale, reward_scale, (n_states, n_actions))
    return Mdp(p, r, np.full(n_states, 1.0 / n_states))


def random_unichain_mdp(rng: np.random.Generator, n_states: int, n_actions: int,
                        max_tries: int = 1000, **kw) -> Mdp:
    """Rejection-sample a random MDP whose deterministic policies are all unichain."""
    from .chains import classify_mdp
    for _ in range(max_tries):
        m = random_mdp(rng, n_states, n_actions, **kw)
        if classify_mdp(m).chain_pattern in ("recurrent", "unichain"):
            return m
    raise RuntimeError("could not sample a unichain MDP")


# --- GridNav --------------------------------------------------------------------------

_MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))   # north, east, south, west


def gridnav(n: int, slip_q: float = 0.9, isd: str = "uniform",
            goal: Optional[tuple] = None) -> ZratModel:
    """n-by-n grid without obstacles, goal at the center cell (n//2, n//2) by default.

    States are the n*n - 1 non-goal cells in row-major order followed by the
    terminal state. An action moves as intended w.p. ``slip_q``; otherwise the
    agent stays or moves in one of the other three directions, each w.p.
    ``(1 - slip_q)/4``. Moves off the grid stay put. Entering the goal pays +1
    and ends in the terminal state; every other transition pays -1.
    ``isd`` is ``"uniform"`` over non-goal cells or ``"corner"`` (top-left).
    """
    if not isinstance(n, (int, np.integer)) or n < 2:
        raise ValidationError("gridnav needs integer n >= 2")
    if not 0.0 <= slip_q <= 1.0:
        raise ValidationError("slip_q must lie in [0, 1]")
    goal = (n // 2, n // 2) if goal is None else tuple(goal)
    if not (0 <= goal[0] < n and 0 <= goal[1] < n):
        raise ValidationError(f"goal {goal} outside the grid")
    cells = [(i, j) for i in range(n) for j in range(n) if (i, j) != goal]
    index = {c: k for k, c in enumerate(cells)}
    z = len(cells)
    n_s = z + 1
    p = np.zeros((n_s, 4, n_s))
    rt = np.full((n_s, 4, n_s), -1.0)

    def dest(cell, d):
        i, j = cell[0] + _MOVES[d][0], cell[1] + _MOVES[d][1]
        if not (0 <= i < n and 0 <= j < n):
            return cell
        return (i, j)

    for cell, s in index.items():
        for a in range(4):
            outcomes = [(a, slip_q)] + [(d, (1 - slip_q) / 4) for d in range(4) if d != a]
            outcomes.append((None, (1 - slip_q) / 4))
            for d, prob in outcomes:
                nxt = cell if d is None else dest(cell, d)
                t = z if nxt == goal else index[nxt]
                p[s, a, t] += prob
        rt[s, :, z] = 1.0
    p[z, 0, z] = 1.0
    rt[z] = 0.0
    avail = np.zeros((n_s, 4), dtype=bool)
    avail[:z] = True
    avail[z, 0] = True
    d0 = np.zeros(n_s)
    if isd == "uniform":
        d0[:z] = 1.0 / z
    elif isd == "corner":
        d0[0] = 1.0
    else:
        raise ValidationError(f"unknown isd {isd!r}")
    labels = tuple(f"({i},{j})" for i, j in cells) + ("terminal",)
    mdp = Mdp(p, None, d0, avail, reward_triple=rt * (p > 0), state_labels=labels,
              action_labels=("N", "E", "S", "W"))
    return ZratModel(mdp, z, 0)


# --- Taxi -----------------------------------------------------------------------------

_TAXI_BASE_WALLS = ((0, 1), (1, 1), (3, 0), (3, 2), (4, 0), (4, 2))  # wall east of (row, col)


def taxi(n: int = 5) -> ZratModel:
    """Taxi on an n-by-n grid with the dynamics and rewards of the Gym version.

    State index ``((row * n + col) * 5 + passenger) * 4 + destination`` where
    passenger 4 means "in the taxi"; the terminal state is appended last.
    Actions: south, north, east, west, pickup, dropoff. Each step pays -1,
    an illegal pickup or dropoff pays -10, and delivering to the destination
    pays +20 and terminates. The isd is uniform over starts with the passenger
    waiting at a location different from the destination.

    Obstacles for n > 5: the 5x5 wall layout is tiled over the (n/5)^2 blocks,
    so the number of wall segments grows with the area. Pickup locations stay
    at the corners R(0,0), G(0,n-1), Y(n-1,0), B(n-1,n-2).
    """
    if n not in (5, 10, 15):
        raise ValidationError("taxi supports n in {5, 10, 15}")
    k = n // 5
    walls = {(bi * 5 + r, bj * 5 + c) for bi in range(k) for bj in range(k)
             for r, c in _TAXI_BASE_WALLS}
    locs = ((0, 0), (0, n - 1), (n - 1, 0), (n - 1, n - 2))
    n_taxi = n * n * 20
    z = n_taxi
    n_s = n_taxi + 1
    p = np.zeros((n_s, 6, n_s))
    rt = np.zeros((n_s, 6, n_s))

    def encode(row, col, pas, dst):
        return ((row * n + col) * 5 + pas) * 4 + dst

    for row in range(n):
        for col in range(n):
            for pas in range(5):
                for dst in range(4):
                    s = encode(row, col, pas, dst)
                    for a in range(6):
                        r, c, ps, reward, done = row, col, pas, -1.0, False
                        if a == 0:
                            r = min(row + 1, n - 1)
                        elif a == 1:
                            r = max(row - 1, 0)
                        elif a == 2 and (row, col) not in walls:
                            c = min(col + 1, n - 1)
                        elif a == 3 and (row, col - 1) not in walls:
                            c = max(col - 1, 0)
                        elif a == 4:
                            if pas < 4 and (row, col) == locs[pas]:
                                ps = 4
                            else:
                                reward = -10.0
                        elif a == 5:
                            if pas == 4 and (row, col) == locs[dst]:
                                reward, done = 20.0, True
                            elif pas == 4 and (row, col) in locs:
                                ps = locs.index((row, col))
                            else:
                                reward = -10.0
                        t = z if done else encode(r, c, ps, dst)
                        p[s, a, t] = 1.0
                        rt[s, a, t] = reward
    p[z, 0, z] = 1.0
    avail = np.ones((n_s, 6), dtype=bool)
    avail[z, 1:] = False
    d0 = np.zeros(n_s)
    for row in range(n):
        for col in range(n):
            for pas in range(4):
                for dst in range(4):
                    if pas != dst:
                        d0[encode(row, col, pas, dst)] = 1.0
    d0 /= d0.sum()
    mdp = Mdp(p, None, d0, avail, reward_triple=rt,
              action_labels=("south", "north", "east", "west", "pickup", "dropoff"))
    return ZratModel(mdp, z, 0)


# --- continuing families ----------------------------------------------------------------

def chain_env(n: int = 5, slip: float = 0.2, small: float = 2.0, large: float = 10.0) -> Mdp:
    """Chain of ``n`` states. Action 0 (forward) advances with reward 0, or
    stays at the last state with reward ``large``; action 1 (back) returns to
    state 0 with reward ``small``. With probability ``slip`` the other action
    is executed instead."""
    if n < 2:
        raise ValidationError("chain_env needs n >= 2")
    if not 0.0 <= slip <= 1.0:
        raise ValidationError("slip must lie in [0, 1]")
    p = np.zeros((n, 2, n))
    rt = np.zeros((n, 2, n))
    for s in range(n):
        fwd = min(s + 1, n - 1)
        fwd_r = large if s == n - 1 else 0.0
        for a in range(2):
            pf = 1.0 - slip if a == 0 else slip
            p[s, a, fwd] += pf
            p[s, a, 0] += 1.0 - pf
            rt[s, a, fwd] = fwd_r
            rt[s, a, 0] = small
    return Mdp(p, None, np.eye(n)[0], reward_triple=rt, action_labels=("forward", "back"))


def torus_env(c: float = 0.1, n: int = 5, rest_speed: float = 0.2, move_speed: float = 0.9,
              lap_reward: float = 1.0) -> Mdp:
    """Ring of ``n`` states. Action 0 (rest) pays ``c`` and advances w.p.
    ``rest_speed``; action 1 (move) pays nothing and advances w.p.
    ``move_speed``. Completing a lap (entering state 0) pays ``lap_reward``."""
    if n < 2:
        raise ValidationError("torus_env needs n >= 2")
    p = np.zeros((n, 2, n))
    rt = np.zeros((n, 2, n))
    for s in range(n):
        nxt = (s + 1) % n
        for a, (speed, base) in enumerate(((rest_speed, c), (move_speed, 0.0))):
            p[s, a, nxt] += speed
            p[s, a, s] += 1.0 - speed
            rt[s, a, s] = base
            rt[s, a, nxt] = base + (lap_reward if nxt == 0 else 0.0)
    return Mdp(p, None, np.eye(n)[0], reward_triple=rt, action_labels=("rest", "move"))


def access_control(n: int = 10, priorities: Sequence[float] = (1, 2, 4, 8),
                   p_free: float = 0.06) -> Mdp:
    """Access-control queue with ``n`` servers.

    State ``free * len(priorities) + k``: ``free`` idle servers and a customer
    of priority index ``k`` at the head of the queue. Action 0 rejects (reward
    0), action 1 accepts (reward = priority, needs a free server). Each busy
    server frees up independently w.p. ``p_free``; the next customer's
    priority is uniform.
    """
    from scipy.stats import binom
    if n < 1:
        raise ValidationError("access_control needs n >= 1 servers")
    m = len(priorities)
    n_s = (n + 1) * m
    p = np.zeros((n_s, 2, n_s))
    r = np.zeros((n_s, 2))
    avail = np.ones((n_s, 2), dtype=bool)
    for free in range(n + 1):
        for k in range(m):
            s = free * m + k
            for a in range(2):
                if a == 1 and free == 0:
                    avail[s, a] = False
                    continue
                f = free - a
                busy = n - f
                freed = binom.pmf(np.arange(busy + 1), busy, p_free)
                for j, pj in enumerate(freed):
                    p[s, a, (f + j) * m:(f + j + 1) * m] += pj / m
                r[s, a] = priorities[k] if a == 1 else 0.0
    return Mdp(p, r, np.full(n_s, 1.0 / n_s), avail, action_labels=("reject", "accept"))


# --- simulator ----------------------------------------------------------------------------

def sample_step(mdp: Mdp, s: int, a: int, rng: np.random.Generator) -> tuple:
    """Draw ``(next_state, reward)``; reward is taken from the triple if present."""
    if not mdp.available[s, a]:
        raise ValidationError(f"action {a} unavailable in state {s}")
    nxt = int(rng.choice(mdp.num_states, p=mdp.transition[s, a]))
    if mdp.reward_triple is not None:
        return nxt, float(mdp.reward_triple[s, a, nxt])
    return nxt, float(mdp.reward[s, a])


# --- landscapes -----------------------------------------------------------------------------

def group_featurizer(mdp: Mdp, groups: Sequence[Sequence[int]], action: int = 1) -> PolicyFeaturizer:
    """Two-parameter (one per state group) logit of ``action`` against the others."""
    k = len(groups)
    phi = np.zeros((mdp.num_states, mdp.num_actions, k))
    for g, states in enumerate(groups):
        for s in states:
            phi[s, action, g] = 1.0
    return PolicyFeaturizer(phi, mdp.available)


def halves_featurizer(mdp: Mdp, action: int = 1) -> PolicyFeaturizer:
    n = mdp.num_states
    return group_featurizer(mdp, [range(n // 2), range(n // 2, n)], action)


@dataclass(frozen=True)
class LandscapeGrid:
    theta1: np.ndarray
    theta2: np.ndarray
    gammas: tuple
    values: np.ndarray          # (res*res, len(gammas) + 1); last column is the gain
    multichain_cells: np.ndarray

    @property
    def keys(self) -> list:
        return [f"scaled_v_gamma={g:g}" for g in self.gammas] + ["gain"]

    def argmax_cell(self, column: int) -> int:
        return int(np.argmax(self.values[:, column]))

    def argmax_theta(self, column: int) -> tuple:
        i = self.argmax_cell(column)
        return float(self.theta1[i]), float(self.theta2[i])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["theta1", "theta2", "key", "value"])
        for i in range(self.values.shape[0]):
            for key, v in zip(self.keys, self.values[i]):
                w.writerow([repr(float(self.theta1[i])), repr(float(self.theta2[i])), key,
                            repr(float(v))])
        return buf.getvalue()


def landscape_grid(mdp: Mdp, featurizer: PolicyFeaturizer, axis1: tuple, axis2: tuple,
                   gammas: Sequence[float], s0: int = 0, jobs: int = 1) -> LandscapeGrid:
    """Exact ``(1 - gamma) v_gamma(s0)`` and gain ``v_g(s0)`` for every grid cell.

    ``axis1``/``axis2`` are ``(lo, hi, resolution)``. Cells whose induced
    chain has several recurrent classes are flagged, not rejected.
    """
    t1 = np.linspace(*axis1[:2], int(axis1[2]))
    t2 = np.linspace(*axis2[:2], int(axis2[2]))
    grid1, grid2 = np.meshgrid(t1, t2, indexing="ij")
    thetas = np.column_stack([grid1.ravel(), grid2.ravel()])
    gammas = tuple(float(g) for g in gammas)

    def cell(theta):
        chain = induce_chain(mdp, featurizer.policy(theta))
        row = []
        for g in gammas:
            row.append(float(chain.r_pi[s0]) if g == 0.0
                       else (1.0 - g) * float(discounted_values(chain, g)[s0]))
        sc = classify_states(chain)
        row.append(float(limiting_matrix(chain, sc)[s0] @ chain.r_pi))
        return row, sc.num_recurrent_classes > 1

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(cell, thetas))
    else:
        results = [cell(th) for th in thetas]
    values = np.array([r for r, _ in results])
    flags = np.array([f for _, f in results])
    return LandscapeGrid(thetas[:, 0], thetas[:, 1], gammas, values, flags)


# --- family sweeps ----------------------------------------------------------------------------

def _gridnav_rst(n):
    return zrat_to_rst(gridnav(int(n))).mdp


FAMILIES: dict = {
    "access_control": lambda k: access_control(int(k)),
    "chain": lambda k: chain_env(int(k)),
    "torus": lambda k: torus_env(float(k)),
    "loop1": lambda k: loop1(float(k)),
    "gridnav": _gridnav_rst,
}


def gamma_bw_family_sweep(family: str, knobs: Sequence, tol: float = 1e-3,
                          grid_size: int = 40, jobs: int = 1) -> list:
    """``[(knob, gamma_bw_hat), ...]`` for one generator family."""
    from .solvers import blackwell_gamma
    if family not in FAMILIES:
        raise ValidationError(f"unknown family {family!r}; choose from {sorted(FAMILIES)}")
    make = FAMILIES[family]
    out = []
    for k in knobs:
        est = blackwell_gamma(make(k), tol=tol, grid_size=grid_size, jobs=jobs)
        out.append((k, est.gamma_bw_hat))
    return out


def generate(family: str, n: Optional[int] = None, slip: Optional[float] = None,
             c: Optional[float] = None):
    """Generator dispatch used by the command line."""
    if family == "puterman3":
        return puterman3_zrat()
    if family == "loop1":
        return loop1(3.0 if c is None else c)
    if family == "gridnav":
        return gridnav(2 if n is None else n, 0.9 if slip is None else slip)
    if family == "taxi":
        return taxi(5 if n is None else n)
    if family == "chain":
        return chain_env(5 if n is None else n, 0.2 if slip is None else slip)
    if family == "torus":
        return torus_env(0.1 if c is None else c, **({} if n is None else {"n": n}))
    if family == "access_control":
        return access_control(10 if n is None else n)
    raise ValidationError(f"unknown family {family!r}")
