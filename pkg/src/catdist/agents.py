"""Per-agent categorical action-value heads with shared parameters.

One network serves every agent; the observation carries a one-hot agent
identity so agents can still specialize. The head emits ``n_actions * m``
logits and each action block is soft-maxed over its m atoms independently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffgraph as dg
from .diffgraph import Node, ParameterSet
from .distcore import SupportSpec


@dataclass(frozen=True)
class AgentObservation:
    """Feature vector an agent conditions on: env obs + last action + identity."""

    features: np.ndarray

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        object.__setattr__(self, "features", feats)
        if feats.ndim != 1:
            raise ValueError("observation features must be 1-D")


def build_features(env_obs, last_action: int | None, agent_id: int,
                   n_actions: int, n_agents: int) -> AgentObservation:
    """Concatenate env observation, one-hot last action, one-hot agent id.

    ``last_action=None`` (episode start) encodes as the all-zero action block.
    """
    action_oh = np.zeros(n_actions)
    if last_action is not None:
        action_oh[last_action] = 1.0
    agent_oh = np.zeros(n_agents)
    agent_oh[agent_id] = 1.0
    return AgentObservation(np.concatenate([np.asarray(env_obs, float),
                                            action_oh, agent_oh]))


@dataclass(frozen=True)
class IndividualDistributionSet:
    """One mass vector per action, all on the shared support."""

    probs: np.ndarray  # (n_actions, m)
    support: SupportSpec

    def __post_init__(self):
        probs = np.ascontiguousarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", probs)
        if probs.ndim != 2:
            raise ValueError("probs must be (n_actions, m)")
        if probs.shape[1] != self.support.m:
            raise ValueError("atom count disagrees with the support")
        sums = probs.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            raise ValueError("each action's masses must sum to 1 within 1e-6")

    @property
    def n_actions(self) -> int:
        return int(self.probs.shape[0])

    def expectations(self) -> np.ndarray:
        return self.probs @ self.support.atoms()


def build_agent_params(rng: np.random.Generator, obs_dim: int, n_actions: int,
                       n_atoms: int, hidden=(64, 64), params: ParameterSet | None = None,
                       prefix: str = "agent") -> ParameterSet:
    """Dense relu tower ending in an (n_actions * m)-logit head."""
    if params is None:
        params = ParameterSet()
    fan_in = obs_dim
    for i, width in enumerate(hidden):
        params.add(f"{prefix}/l{i}/w",
                   rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, width)))
        params.add(f"{prefix}/l{i}/b", np.zeros(width))
        fan_in = width
    out = n_actions * n_atoms
    params.add(f"{prefix}/head/w",
               rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, out)))
    params.add(f"{prefix}/head/b", np.zeros(out))
    return params


def agent_logits(params: ParameterSet, features: Node, prefix: str = "agent") -> Node:
    """Batched forward pass to raw logits, shape (B, n_actions * m)."""
    x = features
    i = 0
    while f"{prefix}/l{i}/w" in params:
        x = dg.activation(dg.dense(x, params[f"{prefix}/l{i}/w"],
                                   params[f"{prefix}/l{i}/b"]), "relu")
        i += 1
    return dg.dense(x, params[f"{prefix}/head/w"], params[f"{prefix}/head/b"])


def agent_forward(obs: AgentObservation, params: ParameterSet,
                  support: SupportSpec, prefix: str = "agent") -> IndividualDistributionSet:
    """Evaluate one observation to a per-action categorical distribution set."""
    logits = agent_logits(params, dg.constant(obs.features[None, :]), prefix)
    head = logits.value[0]
    if head.size % support.m != 0:
        raise ValueError("head width is not a multiple of the atom count")
    n_actions = head.size // support.m
    blocks = head.reshape(n_actions, support.m)
    shifted = blocks - blocks.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    return IndividualDistributionSet(probs, support)


def greedy_action(dists: IndividualDistributionSet) -> int:
    """Action with the largest expected value; ties go to the lowest index."""
    return int(np.argmax(dists.expectations()))


def epsilon_greedy(dists: IndividualDistributionSet, epsilon: float,
                   rng: np.random.Generator) -> int:
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    if rng.random() < epsilon:
        return int(rng.integers(dists.n_actions))
    return greedy_action(dists)
