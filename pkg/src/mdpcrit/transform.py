"""Conversion between an episodic model with a zero-reward absorbing terminal
state (zrat) and its recurrent counterpart with a resetting state (rst).

The conversion assumes the episodic task carries no discounting of its own
from the first step to the end of an episode; that cannot be checked from the
model and is the caller's responsibility.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .chains import maximal_end_components
from .mdp import Mdp, ValidationError, mdp_from_dict, serialize_mdp


@dataclass(frozen=True, eq=False)
class ZratModel:
    """``mdp`` whose ``state`` is absorbing with zero reward under every available action."""

    mdp: Mdp
    state: int
    action: int = 0

    def __post_init__(self):
        m, s, a = self.mdp, self.state, self.action
        if not 0 <= s < m.num_states:
            raise ValidationError(f"terminal state {s} out of range")
        if not 0 <= a < m.num_actions or not m.available[s, a]:
            raise ValidationError(f"terminal action {a} not available at state {s}")
        for b in m.actions(s):
            if m.transition[s, b, s] != 1.0:
                raise ValidationError(f"terminal state {s} is not absorbing under action {b}")
            if m.reward[s, b] != 0.0 or (m.reward_triple is not None
                                         and m.reward_triple[s, b, s] != 0.0):
                raise ValidationError(f"terminal state {s} has nonzero reward under action {b}")

    def distinguished(self) -> dict:
        return {"state": self.state, "action": self.action, "kind": "zrat"}

    def to_json(self) -> str:
        return serialize_mdp(self.mdp, {"distinguished": self.distinguished()})


@dataclass(frozen=True, eq=False)
class RstModel:
    """``mdp`` whose ``state`` has the single reset action ``action`` leading to the isd.

    ``zrat_action`` remembers which action index the terminal self-loop used,
    so that the inverse conversion is exact.
    """

    mdp: Mdp
    state: int
    action: int
    zrat_action: int = 0

    def __post_init__(self):
        m, s, a = self.mdp, self.state, self.action
        if not 0 <= s < m.num_states:
            raise ValidationError(f"reset state {s} out of range")
        if a != m.num_actions - 1:
            raise ValidationError("reset action must be the last action index")
        if not 0 <= self.zrat_action < m.num_actions - 1:
            raise ValidationError("zrat_action must be one of the original actions")
        if tuple(m.actions(s)) != (a,):
            raise ValidationError(f"reset state {s} must have exactly one available action ({a})")
        others = np.ones(m.num_states, dtype=bool)
        others[s] = False
        if m.available[others, a].any():
            raise ValidationError("reset action must be unavailable outside the reset state")
        if np.abs(m.transition[s, a] - m.isd).max() > 0:
            raise ValidationError("reset transition must equal the initial distribution")
        if m.reward[s, a] != 0.0 or (m.reward_triple is not None
                                     and np.any(m.reward_triple[s, a] != 0.0)):
            raise ValidationError("reset transitions must carry zero reward")
        if m.isd[s] != 0.0:
            raise ValidationError("initial distribution must put zero mass on the reset state")

    def distinguished(self) -> dict:
        return {"state": self.state, "action": self.action, "kind": "rst",
                "zrat_action": self.zrat_action}

    def to_json(self) -> str:
        return serialize_mdp(self.mdp, {"distinguished": self.distinguished()})


def check_inevitable_termination(model: ZratModel) -> tuple:
    """``(True, None)`` when {terminal} is the only maximal end component,
    else ``(False, witness)`` with an end component that avoids termination."""
    for ec in maximal_end_components(model.mdp):
        if ec.states != (model.state,):
            return False, ec
    return True, None


def zrat_to_rst(model: ZratModel, require_inevitable: bool = True) -> RstModel:
    """Replace the terminal state by a resetting state with one appended action.

    Transitions into the terminal state now enter the reset state, keeping
    their rewards; the appended action redistributes according to the isd.
    ``require_inevitable=False`` skips the termination check for models where
    some policies never finish (the converted model is then not unichain).
    """
    if model.mdp.isd[model.state] != 0.0:
        raise ValidationError("initial distribution must put zero mass on the terminal state")
    if require_inevitable:
        ok, witness = check_inevitable_termination(model)
        if not ok:
            raise ValidationError(
                f"termination is not inevitable: an end component with {len(witness.states)} "
                f"states (first {list(witness.states[:5])}) avoids it")
    m, z = model.mdp, model.state
    n_s, n_a = m.num_states, m.num_actions
    p = np.zeros((n_s, n_a + 1, n_s))
    p[:, :n_a] = m.transition
    p[z, :n_a] = 0.0
    p[z, n_a] = m.isd
    r = np.zeros((n_s, n_a + 1))
    r[:, :n_a] = m.reward
    r[z] = 0.0
    avail = np.zeros((n_s, n_a + 1), dtype=bool)
    avail[:, :n_a] = m.available
    avail[z] = False
    avail[z, n_a] = True
    triple = None
    if m.reward_triple is not None:
        triple = np.zeros((n_s, n_a + 1, n_s))
        triple[:, :n_a] = m.reward_triple
        triple[z] = 0.0
    labels = None if m.action_labels is None else m.action_labels + ("reset",)
    out = m.replace(transition=p, reward=None if triple is not None else r,
                    available=avail, reward_triple=triple, action_labels=labels)
    return RstModel(out, z, n_a, model.action)


def rst_to_zrat(model: RstModel) -> ZratModel:
    """Inverse of :func:`zrat_to_rst`: the reset state becomes a terminal self-loop.

    Only ``zrat_action`` is restored at the terminal state, so the round trip
    is exact for terminal models with a single available terminal action.
    """
    m, z, a0 = model.mdp, model.state, model.zrat_action
    n_a = m.num_actions - 1
    p = np.array(m.transition[:, :n_a])
    p[z] = 0.0
    p[z, a0, z] = 1.0
    r = np.array(m.reward[:, :n_a])
    avail = np.array(m.available[:, :n_a])
    avail[z] = False
    avail[z, a0] = True
    triple = None if m.reward_triple is None else np.array(m.reward_triple[:, :n_a])
    labels = None if m.action_labels is None else m.action_labels[:n_a]
    out = m.replace(transition=p, reward=None if triple is not None else r,
                    available=avail, reward_triple=triple, action_labels=labels)
    return ZratModel(out, z, a0)


def model_from_dict(doc: dict):
    """Build a ``ZratModel``/``RstModel`` when the document has a distinguished
    entry, else a plain ``Mdp``."""
    mdp = mdp_from_dict(doc)
    dist = doc.get("distinguished")
    if dist is None:
        return mdp
    try:
        kind, state, action = dist["kind"], int(dist["state"]), int(dist["action"])
    except (KeyError, TypeError, ValueError):
        raise ValidationError("distinguished needs integer 'state', 'action' and a 'kind'") from None
    if kind == "zrat":
        return ZratModel(mdp, state, action)
    if kind == "rst":
        return RstModel(mdp, state, action, int(dist.get("zrat_action", 0)))
    raise ValidationError(f"unknown distinguished kind {kind!r}")


def model_to_json(model) -> str:
    if isinstance(model, (ZratModel, RstModel)):
        return model.to_json()
    return serialize_mdp(model)


def as_mdp(model) -> Mdp:
    return model.mdp if isinstance(model, (ZratModel, RstModel)) else model
