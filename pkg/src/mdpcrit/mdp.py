"""Finite MDP data model, stationary policies, induced chains and JSON I/O."""
from __future__ import annotations

import itertools
import json
import os
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

STOCH_TOL = 1e-12
DEFAULT_MAX_ENUM = 10**6


class ValidationError(ValueError):
    """Raised when a model, policy or document violates its invariants."""


def max_enum() -> int:
    """Enumeration cap, overridable through ``MDPCRIT_MAX_ENUM``."""
    raw = os.environ.get("MDPCRIT_MAX_ENUM")
    return int(raw) if raw else DEFAULT_MAX_ENUM


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mdp:
    """Finite MDP with a uniform action index set and an availability mask.

    ``transition[s, a]`` is the next-state distribution and ``reward[s, a]``
    the expected immediate reward. Rows of unavailable actions are ignored by
    every solver; they must be either all-zero or a distribution.
    """

    transition: np.ndarray
    reward: np.ndarray
    isd: np.ndarray
    available: Optional[np.ndarray] = None
    reward_triple: Optional[np.ndarray] = None
    state_labels: Optional[tuple] = None
    action_labels: Optional[tuple] = None

    def __post_init__(self):
        p = _readonly(self.transition)
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise ValidationError(f"transition must be |S|x|A|x|S|, got {p.shape}")
        n_s, n_a, _ = p.shape
        if n_s < 1 or n_a < 1:
            raise ValidationError("need at least one state and one action")
        object.__setattr__(self, "transition", p)

        avail = (np.ones((n_s, n_a), dtype=bool) if self.available is None
                 else np.array(self.available, dtype=bool))
        if avail.shape != (n_s, n_a):
            raise ValidationError(f"available must be {(n_s, n_a)}, got {avail.shape}")
        if not avail.any(axis=1).all():
            bad = int(np.flatnonzero(~avail.any(axis=1))[0])
            raise ValidationError(f"state {bad} has no available action")
        avail.setflags(write=False)
        object.__setattr__(self, "available", avail)

        if (p < 0).any():
            s, a, s2 = np.argwhere(p < 0)[0]
            raise ValidationError(f"negative transition probability at (s={s}, a={a}, s'={s2})")
        sums = p.sum(axis=2)
        for s, a in zip(*np.nonzero(avail)):
            if abs(sums[s, a] - 1.0) > STOCH_TOL:
                raise ValidationError(
                    f"transition row (s={s}, a={a}) sums to {sums[s, a]!r}, not 1")
        for s, a in zip(*np.nonzero(~avail)):
            if abs(sums[s, a]) > STOCH_TOL and abs(sums[s, a] - 1.0) > STOCH_TOL:
                raise ValidationError(
                    f"unavailable transition row (s={s}, a={a}) sums to {sums[s, a]!r}")

        if self.reward_triple is not None:
            rt = _readonly(self.reward_triple)
            if rt.shape != p.shape:
                raise ValidationError(f"reward_triple must be {p.shape}, got {rt.shape}")
            object.__setattr__(self, "reward_triple", rt)
            expected = (p * rt).sum(axis=2)
            if self.reward is None:
                object.__setattr__(self, "reward", _readonly(expected))
            else:
                r = np.asarray(self.reward, dtype=float)
                if r.shape == (n_s, n_a) and np.abs(r - expected).max() > STOCH_TOL:
                    raise ValidationError("reward disagrees with transition-weighted reward_triple")
        r = _readonly(self.reward)
        if r.shape != (n_s, n_a):
            raise ValidationError(f"reward must be {(n_s, n_a)}, got {r.shape}")
        if not np.isfinite(r).all():
            raise ValidationError("rewards must be finite")
        object.__setattr__(self, "reward", r)

        d = _readonly(self.isd)
        if d.shape != (n_s,):
            raise ValidationError(f"isd must have length {n_s}, got {d.shape}")
        if (d < 0).any() or abs(d.sum() - 1.0) > STOCH_TOL:
            raise ValidationError(f"isd must be a distribution (sum={d.sum()!r})")
        object.__setattr__(self, "isd", d)

        for name, n in (("state_labels", n_s), ("action_labels", n_a)):
            labels = getattr(self, name)
            if labels is not None:
                labels = tuple(str(x) for x in labels)
                if len(labels) != n:
                    raise ValidationError(f"{name} must have {n} entries")
                object.__setattr__(self, name, labels)

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def r_max(self) -> float:
        return float(np.abs(self.reward[self.available]).max())

    def actions(self, s: int) -> np.ndarray:
        return np.flatnonzero(self.available[s])

    def num_policies(self) -> int:
        return int(np.prod(self.available.sum(axis=1), dtype=object))

    def replace(self, **changes) -> "Mdp":
        fields = dict(transition=self.transition, reward=self.reward, isd=self.isd,
                      available=self.available, reward_triple=self.reward_triple,
                      state_labels=self.state_labels, action_labels=self.action_labels)
        fields.update(changes)
        return Mdp(**fields)


@dataclass(frozen=True, eq=False)
class PolicyTable:
    """Stationary policy as a row-stochastic |S|x|A| matrix."""

    probs: np.ndarray

    def __post_init__(self):
        p = _readonly(self.probs)
        if p.ndim != 2:
            raise ValidationError("policy must be a 2-d |S|x|A| matrix")
        if (p < 0).any():
            raise ValidationError("policy has negative probabilities")
        sums = p.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > STOCH_TOL)
        if bad.size:
            raise ValidationError(f"policy row {int(bad[0])} sums to {sums[bad[0]]!r}")
        object.__setattr__(self, "probs", p)

    @classmethod
    def deterministic(cls, actions: Sequence[int], num_actions: int) -> "PolicyTable":
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((len(actions), num_actions))
        probs[np.arange(len(actions)), actions] = 1.0
        return cls(probs)

    @property
    def is_deterministic(self) -> bool:
        return bool(((self.probs == 1.0).sum(axis=1) == 1).all())

    def greedy_actions(self) -> tuple:
        """Most probable action per state, lowest index on ties."""
        return tuple(int(a) for a in np.argmax(self.probs, axis=1))

    def mix(self, other: "PolicyTable", weight: float) -> "PolicyTable":
        return PolicyTable((1.0 - weight) * self.probs + weight * other.probs)


@dataclass(frozen=True, eq=False)
class InducedChain:
    """Markov chain ``(P_pi, r_pi)`` induced by a stationary policy."""

    p_pi: np.ndarray
    r_pi: np.ndarray

    def __post_init__(self):
        p = _readonly(self.p_pi)
        r = _readonly(self.r_pi)
        if p.ndim != 2 or p.shape[0] != p.shape[1] or r.shape != (p.shape[0],):
            raise ValidationError(f"bad chain shapes {p.shape}, {r.shape}")
        if (p < 0).any() or np.abs(p.sum(axis=1) - 1.0).max() > 1e-10:
            raise ValidationError("chain matrix is not row-stochastic")
        object.__setattr__(self, "p_pi", p)
        object.__setattr__(self, "r_pi", r)

    @property
    def num_states(self) -> int:
        return self.p_pi.shape[0]


def induce_chain(mdp: Mdp, policy: PolicyTable) -> InducedChain:
    pi = policy.probs
    if pi.shape != (mdp.num_states, mdp.num_actions):
        raise ValidationError(
            f"policy shape {pi.shape} does not match MDP {(mdp.num_states, mdp.num_actions)}")
    if (pi[~mdp.available] > 0).any():
        s, a = np.argwhere((pi > 0) & ~mdp.available)[0]
        raise ValidationError(f"policy uses unavailable action {a} in state {s}")
    p_pi = np.einsum("sa,sat->st", pi, mdp.transition)
    r_pi = (pi * mdp.reward).sum(axis=1)
    return InducedChain(p_pi, r_pi)


def deterministic_chain(mdp: Mdp, actions: Sequence[int]) -> InducedChain:
    """Faster path for a deterministic policy given as an action tuple."""
    idx = np.arange(mdp.num_states)
    actions = np.asarray(actions, dtype=int)
    if not mdp.available[idx, actions].all():
        s = int(np.flatnonzero(~mdp.available[idx, actions])[0])
        raise ValidationError(f"action {actions[s]} unavailable in state {s}")
    return InducedChain(mdp.transition[idx, actions], mdp.reward[idx, actions])


def enumerate_deterministic_policies(mdp: Mdp, cap: Optional[int] = None) -> Iterator[tuple]:
    """Yield every deterministic stationary policy as an action tuple.

    Order is lexicographic with state 0 most significant. Raises
    ``ValidationError`` when the count exceeds ``cap``.
    """
    cap = max_enum() if cap is None else cap
    count = mdp.num_policies()
    if count > cap:
        raise ValidationError(f"{count} deterministic policies exceed enumeration cap {cap}")
    return itertools.product(*(tuple(int(a) for a in mdp.actions(s)) for s in range(mdp.num_states)))


def enumerate_policy_tables(mdp: Mdp, cap: Optional[int] = None) -> Iterator[PolicyTable]:
    for actions in enumerate_deterministic_policies(mdp, cap):
        yield PolicyTable.deterministic(actions, mdp.num_actions)


def uniform_policy(mdp: Mdp) -> PolicyTable:
    avail = mdp.available.astype(float)
    return PolicyTable(avail / avail.sum(axis=1, keepdims=True))


# --- JSON --------------------------------------------------------------------

def mdp_to_dict(mdp: Mdp) -> dict:
    doc = {"num_states": mdp.num_states, "num_actions": mdp.num_actions,
           "transition": mdp.transition.tolist()}
    if mdp.reward_triple is not None:
        doc["reward_triple"] = mdp.reward_triple.tolist()
    else:
        doc["reward"] = mdp.reward.tolist()
    doc["isd"] = mdp.isd.tolist()
    if not mdp.available.all():
        doc["available"] = mdp.available.astype(int).tolist()
    if mdp.state_labels is not None:
        doc["state_labels"] = list(mdp.state_labels)
    if mdp.action_labels is not None:
        doc["action_labels"] = list(mdp.action_labels)
    return doc


def serialize_mdp(mdp: Mdp, extra: Optional[dict] = None) -> str:
    """Canonical JSON (fixed key order, shortest round-trip floats)."""
    doc = mdp_to_dict(mdp)
    if extra:
        doc.update(extra)
    return json.dumps(doc, separators=(",", ":")) + "\n"


_KNOWN_KEYS = {"num_states", "num_actions", "transition", "reward", "reward_triple", "isd",
               "available", "state_labels", "action_labels", "distinguished"}


def mdp_from_dict(doc: dict) -> Mdp:
    if not isinstance(doc, dict):
        raise ValidationError("MDP document must be a JSON object")
    unknown = set(doc) - _KNOWN_KEYS
    if unknown:
        raise ValidationError(f"unknown MDP fields: {sorted(unknown)}")
    for key in ("num_states", "num_actions", "transition", "isd"):
        if key not in doc:
            raise ValidationError(f"missing required field {key!r}")
    if ("reward" in doc) == ("reward_triple" in doc):
        raise ValidationError("exactly one of 'reward' or 'reward_triple' is required")
    n_s, n_a = doc["num_states"], doc["num_actions"]
    if not (isinstance(n_s, int) and isinstance(n_a, int) and n_s > 0 and n_a > 0):
        raise ValidationError("num_states and num_actions must be positive integers")
    try:
        p = np.array(doc["transition"], dtype=float)
        triple = np.array(doc["reward_triple"], dtype=float) if "reward_triple" in doc else None
        r = np.array(doc["reward"], dtype=float) if "reward" in doc else None
        isd = np.array(doc["isd"], dtype=float)
        avail = np.array(doc["available"], dtype=int) if "available" in doc else None
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"malformed numeric array: {exc}") from None
    if p.shape != (n_s, n_a, n_s):
        raise ValidationError(f"transition shape {p.shape} != {(n_s, n_a, n_s)}")
    if avail is not None and not np.isin(avail, (0, 1)).all():
        raise ValidationError("available entries must be 0 or 1")
    return Mdp(transition=p, reward=r, isd=isd, available=avail, reward_triple=triple,
               state_labels=doc.get("state_labels"), action_labels=doc.get("action_labels"))


def parse_mdp(text: str) -> Mdp:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"invalid JSON: {exc}") from None
    return mdp_from_dict(doc)


def load_mdp(path) -> Mdp:
    with open(path, encoding="utf-8") as fh:
        return parse_mdp(fh.read())


def policy_to_dict(policy: PolicyTable) -> dict:
    return {"probs": policy.probs.tolist()}


def policy_from_dict(doc, num_actions: Optional[int] = None) -> PolicyTable:
    """Accept ``{"probs": [[...]]}`` or ``{"actions": [...]}`` (or a bare action list)."""
    if isinstance(doc, list):
        doc = {"actions": doc}
    if "probs" in doc:
        return PolicyTable(np.array(doc["probs"], dtype=float))
    if "actions" in doc:
        if num_actions is None:
            raise ValidationError("num_actions needed for an action-list policy")
        return PolicyTable.deterministic(doc["actions"], num_actions)
    raise ValidationError("policy document needs 'probs' or 'actions'")
