"""Two-agent stochastic matrix games with mixture-of-Gaussian payoffs.

The game is stateless: observations carry a constant token, the previous
action, and the agent identity; the global state is a constant plus the
normalized step counter. A ``horizon > 1`` variant repeats the same payoff
matrix each step to exercise non-terminal bootstrapping.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import jsonschema
import numpy as np

from .agents import AgentObservation, build_features

N_AGENTS = 2


@dataclass(frozen=True)
class RewardSpec:
    """Mixture of Gaussians: tuple of (weight, mean, variance) components."""

    components: tuple[tuple[float, float, float], ...]

    def __post_init__(self):
        comps = tuple((float(w), float(mu), float(var))
                      for w, mu, var in self.components)
        object.__setattr__(self, "components", comps)
        if not comps:
            raise ValueError("reward mixture needs at least one component")
        weights = [w for w, _, _ in comps]
        if any(w <= 0 for w in weights):
            raise ValueError("mixture weights must be positive")
        if abs(sum(weights) - 1.0) > 1e-9:
            raise ValueError("mixture weights must sum to 1")
        if any(var < 0 for _, _, var in comps):
            raise ValueError("variances must be non-negative")

    def mean(self) -> float:
        return sum(w * mu for w, mu, _ in self.components)

    def variance(self) -> float:
        mu = self.mean()
        second = sum(w * (var + m * m) for w, m, var in self.components)
        return second - mu * mu

    def sample(self, rng: np.random.Generator) -> float:
        idx = rng.choice(len(self.components),
                         p=[w for w, _, _ in self.components])
        _, mu, var = self.components[idx]
        return float(rng.normal(mu, math.sqrt(var)))

    def to_json_obj(self) -> list:
        return [{"w": w, "mu": mu, "var": var} for w, mu, var in self.components]

    @classmethod
    def from_json_obj(cls, obj: list) -> "RewardSpec":
        return cls(tuple((c["w"], c["mu"], c["var"]) for c in obj))


MATRIX_GAME_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["payoff"],
    "properties": {
        "actions": {"type": "integer", "minimum": 2},
        "horizon": {"type": "integer", "minimum": 1},
        "gamma": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "payoff": {
            "type": "object",
            "minProperties": 1,
            "additionalProperties": False,
            "patternProperties": {
                r"^\d+,\d+$": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["w", "mu", "var"],
                        "properties": {
                            "w": {"type": "number", "exclusiveMinimum": 0},
                            "mu": {"type": "number"},
                            "var": {"type": "number", "minimum": 0},
                        },
                    },
                },
            },
        },
    },
}


@dataclass(frozen=True)
class MatrixGameSpec:
    """Payoff table over joint actions of two agents, with horizon and discount."""

    payoff: dict
    n_actions: int = 2
    horizon: int = 1
    gamma: float = 0.99

    def __post_init__(self):
        object.__setattr__(self, "n_actions", int(self.n_actions))
        object.__setattr__(self, "horizon", int(self.horizon))
        object.__setattr__(self, "gamma", float(self.gamma))
        if self.n_actions < 2:
            raise ValueError("each agent needs at least two actions")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        table = {}
        for key, spec in self.payoff.items():
            key = (int(key[0]), int(key[1]))
            if not all(0 <= a < self.n_actions for a in key):
                raise ValueError(f"joint action {key} outside the action space")
            if not isinstance(spec, RewardSpec):
                spec = RewardSpec(tuple(spec))
            table[key] = spec
        expected = {(a1, a2) for a1 in range(self.n_actions)
                    for a2 in range(self.n_actions)}
        if set(table) != expected:
            missing = sorted(expected - set(table))
            raise ValueError(f"payoff table incomplete, missing {missing}")
        object.__setattr__(self, "payoff", table)

    @property
    def n_agents(self) -> int:
        return N_AGENTS

    @property
    def obs_dim(self) -> int:
        return 1 + self.n_actions + N_AGENTS

    @property
    def state_dim(self) -> int:
        return 2

    def joint_actions(self) -> list[tuple[int, int]]:
        return [(a1, a2) for a1 in range(self.n_actions)
                for a2 in range(self.n_actions)]

    def to_json_obj(self) -> dict:
        return {
            "actions": self.n_actions,
            "horizon": self.horizon,
            "gamma": self.gamma,
            "payoff": {f"{a1},{a2}": spec.to_json_obj()
                       for (a1, a2), spec in sorted(self.payoff.items())},
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "MatrixGameSpec":
        jsonschema.validate(obj, MATRIX_GAME_SCHEMA)
        payoff = {tuple(int(s) for s in key.split(",")): RewardSpec.from_json_obj(val)
                  for key, val in obj["payoff"].items()}
        return cls(payoff=payoff,
                   n_actions=obj.get("actions", 2),
                   horizon=obj.get("horizon", 1),
                   gamma=obj.get("gamma", 0.99))

    @classmethod
    def load(cls, path) -> "MatrixGameSpec":
        with open(path) as fh:
            return cls.from_json_obj(json.load(fh))


@dataclass(frozen=True)
class Transition:
    """One environment step as the trainer stores it."""

    obs: tuple[AgentObservation, ...]
    actions: tuple[int, ...]
    reward: float
    next_obs: tuple[AgentObservation, ...]
    terminal: bool
    state: np.ndarray
    next_state: np.ndarray


def global_state(spec: MatrixGameSpec, t: int) -> np.ndarray:
    """Constant token plus the normalized step counter."""
    return np.array([1.0, t / spec.horizon])


def observations(spec: MatrixGameSpec, last_actions) -> tuple[AgentObservation, ...]:
    """Per-agent features; ``last_actions=None`` marks the episode start."""
    return tuple(
        build_features([1.0],
                       None if last_actions is None else last_actions[i],
                       i, spec.n_actions, N_AGENTS)
        for i in range(N_AGENTS))


def step(spec: MatrixGameSpec, t: int, joint_action, rng: np.random.Generator,
         last_actions=None) -> Transition:
    """Sample one transition at step ``t`` given the chosen joint action."""
    joint_action = (int(joint_action[0]), int(joint_action[1]))
    if joint_action not in spec.payoff:
        raise KeyError(f"joint action {joint_action} undefined for this game")
    if not 0 <= t < spec.horizon:
        raise ValueError(f"step index {t} outside horizon {spec.horizon}")
    reward = spec.payoff[joint_action].sample(rng)
    return Transition(
        obs=observations(spec, last_actions),
        actions=joint_action,
        reward=reward,
        next_obs=observations(spec, joint_action),
        terminal=t + 1 >= spec.horizon,
        state=global_state(spec, t),
        next_state=global_state(spec, t + 1),
    )


def default_matrix_game() -> MatrixGameSpec:
    """Default 2x2 game; the second column pays balanced bimodal mixtures.

    Payoffs decompose additively over agents (agent one contributes N(-1,1)
    or N(2,1), agent two contributes N(1,1) or an even mix of N(-1,1) and
    N(6,1)), so a sum of two independent per-agent returns reproduces every
    entry exactly, bimodality included. A monotone mixer trained on the four
    entries can therefore in principle drive the error to the grid floor.
    """
    return MatrixGameSpec(payoff={
        (0, 0): RewardSpec(((1.0, 0.0, 2.0),)),
        (0, 1): RewardSpec(((0.5, -2.0, 2.0), (0.5, 5.0, 2.0))),
        (1, 0): RewardSpec(((1.0, 3.0, 2.0),)),
        (1, 1): RewardSpec(((0.5, 1.0, 2.0), (0.5, 8.0, 2.0))),
    })
