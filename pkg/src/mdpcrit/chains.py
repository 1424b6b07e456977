"""State, chain and MDP classification; stationary and limiting matrices."""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .mdp import (InducedChain, Mdp, ValidationError, deterministic_chain,
                  enumerate_deterministic_policies, max_enum)


class MultichainError(ValueError):
    """Raised when an operation needs a single recurrent class."""


def strong_components(adj: np.ndarray) -> np.ndarray:
    """Label of the strongly connected component of every node of a boolean digraph."""
    _, labels = connected_components(csr_matrix(adj.astype(np.int8)), directed=True,
                                     connection="strong")
    return labels


def bottom_components(adj: np.ndarray) -> list:
    """SCCs with no edge leaving them, each as a sorted index array."""
    labels = strong_components(adj)
    out = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        leaving = adj[members][:, labels != c]
        if not leaving.any():
            out.append(members)
    out.sort(key=lambda m: m[0])
    return out


def _period(adj: np.ndarray, members: np.ndarray) -> int:
    """gcd of cycle lengths inside a strongly connected node set (0 if acyclic)."""
    sub = adj[np.ix_(members, members)]
    level = -np.ones(len(members), dtype=int)
    level[0] = 0
    frontier = [0]
    while frontier:
        nxt = []
        for u in frontier:
            for v in np.flatnonzero(sub[u]):
                if level[v] < 0:
                    level[v] = level[u] + 1
                    nxt.append(v)
        frontier = nxt
    g = 0
    for u, v in zip(*np.nonzero(sub)):
        g = math.gcd(g, int(level[u] + 1 - level[v]))
    return g


@dataclass(frozen=True)
class StateClassification:
    recurrent: tuple           # bool per state
    period: tuple              # positive int per state
    recurrent_class_id: tuple  # class index per state, None for transient states

    @property
    def num_recurrent_classes(self) -> int:
        ids = [c for c in self.recurrent_class_id if c is not None]
        return len(set(ids))

    def classes(self) -> list:
        n = self.num_recurrent_classes
        return [np.array([s for s, c in enumerate(self.recurrent_class_id) if c == k])
                for k in range(n)]

    def transient_states(self) -> np.ndarray:
        return np.array([s for s, r in enumerate(self.recurrent) if not r], dtype=int)

    def to_dict(self) -> dict:
        return {"state_class": ["recurrent" if r else "transient" for r in self.recurrent],
                "period": list(self.period),
                "recurrent_class_id": list(self.recurrent_class_id)}


def classify_states(chain: InducedChain) -> StateClassification:
    """Recurrent classes are the bottom SCCs of the positive-probability digraph.

    Periods are computed per SCC; a transient state that cannot return to
    itself gets period 1.
    """
    adj = chain.p_pi > 0
    n = chain.num_states
    labels = strong_components(adj)
    period = [1] * n
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        g = _period(adj, members)
        for s in members:
            period[s] = g if g > 0 else 1
    class_id: list = [None] * n
    for k, members in enumerate(bottom_components(adj)):
        for s in members:
            class_id[s] = k
    recurrent = tuple(c is not None for c in class_id)
    return StateClassification(recurrent, tuple(period), tuple(class_id))


@dataclass(frozen=True)
class ChainReport:
    classification: StateClassification
    chain_class: str
    num_recurrent_classes: int

    def to_dict(self) -> dict:
        return {"chain_class": self.chain_class,
                "num_recurrent_classes": self.num_recurrent_classes,
                **self.classification.to_dict()}


def classify_chain(chain: InducedChain) -> ChainReport:
    sc = classify_states(chain)
    k = sc.num_recurrent_classes
    if k > 1:
        label = "multichain"
    elif all(sc.recurrent):
        label = "irreducible-aperiodic" if sc.period[0] == 1 else "irreducible-periodic"
    else:
        label = "unichain"
    return ChainReport(sc, label, k)


def is_unichain(chain: InducedChain) -> bool:
    return classify_states(chain).num_recurrent_classes == 1


# --- stationary / limiting matrices ---------------------------------------------

def _class_stationary(p_cc: np.ndarray) -> np.ndarray:
    """Stationary vector of an irreducible stochastic block (exact linear solve)."""
    m = p_cc.shape[0]
    a = (np.eye(m) - p_cc).T
    a[-1, :] = 1.0
    b = np.zeros(m)
    b[-1] = 1.0
    x = np.linalg.solve(a, b)
    x = np.clip(x, 0.0, None)
    return x / x.sum()


def limiting_matrix(chain: InducedChain, classification: Optional[StateClassification] = None) -> np.ndarray:
    """Cesaro limit P* of the chain, assembled from per-class stationary vectors
    and absorption probabilities of transient states (valid for periodic chains)."""
    sc = classification or classify_states(chain)
    p = chain.p_pi
    n = chain.num_states
    pstar = np.zeros((n, n))
    classes = sc.classes()
    transient = sc.transient_states()
    if transient.size:
        q = p[np.ix_(transient, transient)]
        fundamental_lhs = np.eye(transient.size) - q
    for members in classes:
        mu = _class_stationary(p[np.ix_(members, members)])
        pstar[np.ix_(members, members)] = mu[None, :]
        if transient.size:
            into = p[np.ix_(transient, members)].sum(axis=1)
            absorb = np.linalg.solve(fundamental_lhs, into)
            pstar[np.ix_(transient, members)] = np.clip(absorb, 0.0, 1.0)[:, None] * mu[None, :]
    return pstar


def stationary_distribution(chain: InducedChain, start: int = 0) -> np.ndarray:
    """Stationary distribution of a unichain chain (independent of ``start``)."""
    if not 0 <= start < chain.num_states:
        raise ValidationError(f"start state {start} out of range")
    sc = classify_states(chain)
    if sc.num_recurrent_classes != 1:
        raise MultichainError(
            f"chain has {sc.num_recurrent_classes} recurrent classes; use limiting_matrix "
            "for start-dependent limits")
    members = sc.classes()[0]
    out = np.zeros(chain.num_states)
    out[members] = _class_stationary(chain.p_pi[np.ix_(members, members)])
    return out


# --- MDP-level classification ------------------------------------------------------

def union_graph(mdp: Mdp) -> np.ndarray:
    """Edge s->s' if some available action moves s to s' with positive probability."""
    return ((mdp.transition > 0) & mdp.available[:, :, None]).any(axis=1)


@dataclass(frozen=True)
class EndComponent:
    states: tuple
    actions: dict  # state -> tuple of actions that stay inside

    def to_dict(self) -> dict:
        return {"states": list(self.states),
                "actions": {str(s): list(a) for s, a in self.actions.items()}}


def maximal_end_components(mdp: Mdp, states: Optional[np.ndarray] = None) -> list:
    """Maximal end components by iterated SCC pruning.

    An action is kept at a state only while its whole support stays in the
    state's current SCC; states left without actions are dropped.
    """
    n = mdp.num_states
    alive = np.zeros(n, dtype=bool)
    alive[np.arange(n) if states is None else states] = True
    support = mdp.transition > 0
    acts = mdp.available.copy()
    acts[~alive] = False
    while True:
        edges = (support & acts[:, :, None]).any(axis=1)
        edges[~alive] = False
        edges[:, ~alive] = False
        labels = strong_components(edges)
        changed = False
        for s in np.flatnonzero(alive):
            same = labels == labels[s]
            for a in np.flatnonzero(acts[s]):
                if (support[s, a] & ~(same & alive)).any():
                    acts[s, a] = False
                    changed = True
            if not acts[s].any():
                alive[s] = False
                changed = True
        if not changed:
            break
    edges = (support & acts[:, :, None]).any(axis=1)
    labels = strong_components(edges)
    comps = []
    for c in np.unique(labels[alive]):
        members = np.flatnonzero((labels == c) & alive)
        comps.append(EndComponent(tuple(int(s) for s in members),
                                  {int(s): tuple(int(a) for a in np.flatnonzero(acts[s]))
                                   for s in members}))
    comps.sort(key=lambda ec: ec.states[0])
    return comps


@dataclass(frozen=True)
class MdpClassReport:
    chain_pattern: str
    accessibility: str
    method: str
    num_policies_checked: int = 0
    always_transient: tuple = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["always_transient"] = list(self.always_transient)
        return d


def classify_mdp(mdp: Mdp, cap: Optional[int] = None) -> MdpClassReport:
    """Chain pattern over all deterministic policies plus accessibility class.

    Deterministic policies suffice for the chain pattern: a randomized policy's
    edge set is a union of deterministic ones, so it has no more recurrent
    classes and no more transient states than some deterministic policy.
    """
    cap = max_enum() if cap is None else cap
    g = union_graph(mdp)
    n = mdp.num_states
    if len(np.unique(strong_components(g))) == 1:
        access = "communicating"
    else:
        mecs = maximal_end_components(mdp)
        in_mec = np.zeros(n, dtype=bool)
        for ec in mecs:
            in_mec[list(ec.states)] = True
        core = np.flatnonzero(in_mec)
        labels = strong_components(g)
        access = ("weakly-communicating" if core.size and len(np.unique(labels[core])) == 1
                  else "not-weakly-communicating")
    always_transient = ()
    if access != "communicating":
        mecs = maximal_end_components(mdp)
        covered = set(s for ec in mecs for s in ec.states)
        always_transient = tuple(s for s in range(n) if s not in covered)

    if mdp.num_policies() > cap:
        return MdpClassReport("unknown(structural-bound)", access, "structural",
                              0, always_transient)
    pattern = "recurrent"
    count = 0
    for actions in enumerate_deterministic_policies(mdp, cap):
        count += 1
        sc = classify_states(deterministic_chain(mdp, actions))
        if sc.num_recurrent_classes > 1:
            pattern = "multichain"
            break
        if not all(sc.recurrent):
            pattern = "unichain"
    return MdpClassReport(pattern, access, "enumeration", count, always_transient)
