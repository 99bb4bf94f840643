"""Training loop: replay, rollouts, projected Bellman targets, evaluation.

The learned object is always the full categorical return distribution of the
joint policy; the loss is the cross entropy between the projected one-step
target and the mixed prediction. With a one-step game and full exploration
the targets are projected point masses at the sampled rewards, so the
network is fitting the reward distribution per joint action directly.
"""

from __future__ import annotations

import csv
import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import agents
from . import diffgraph as dg
from . import distcore as dc
from . import envs
from . import mixers
from . import oracle
from .diffgraph import Adam, Node, ParameterSet
from .distcore import SupportSpec
from .envs import MatrixGameSpec, Transition
from .mixers import MixerConfig

ALGORITHMS = ("dvdn", "dqmix")


@dataclass(frozen=True)
class EpsilonSchedule:
    """Linear decay from ``start`` to ``end`` over ``decay_steps`` env steps."""

    start: float = 1.0
    end: float = 1.0
    decay_steps: int = 1

    def __post_init__(self):
        for v in (self.start, self.end):
            if not 0.0 <= v <= 1.0:
                raise ValueError("epsilon must lie in [0, 1]")
        if self.decay_steps < 1:
            raise ValueError("decay_steps must be positive")

    def value(self, step: int) -> float:
        frac = min(max(step / self.decay_steps, 0.0), 1.0)
        return self.start + frac * (self.end - self.start)


@dataclass(frozen=True)
class TrainConfig:
    support: SupportSpec = SupportSpec(-10.0, 20.0, 51)
    algo: str = "dqmix"
    gamma: float | None = None      # None: take the game's discount
    lr: float = 5e-4
    batch_episodes: int = 32
    train_every: int = 8            # episodes between gradient updates
    target_sync: int = 200          # updates between target refreshes
    replay_capacity: int = 5000     # episodes
    epsilon: EpsilonSchedule = EpsilonSchedule()
    total_steps: int = 100_000
    eval_every: int = 5000          # env steps between metric rows
    seed: int = 0
    hidden: tuple = (64, 64)
    mixer: MixerConfig = field(default_factory=MixerConfig)

    def __post_init__(self):
        if self.algo not in ALGORITHMS:
            raise ValueError(f"algo must be one of {ALGORITHMS}")
        if self.gamma is not None and not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        for name in ("lr", "batch_episodes", "train_every", "target_sync",
                     "replay_capacity", "total_steps", "eval_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_episodes > self.replay_capacity:
            raise ValueError("batch cannot exceed replay capacity")


def resolve_gamma(config: TrainConfig, game: MatrixGameSpec) -> TrainConfig:
    if config.gamma is None:
        return replace(config, gamma=game.gamma)
    return config


class ReplayMemory:
    """Episode ring buffer: FIFO eviction, uniform draws without replacement."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self._episodes: deque[list[Transition]] = deque(maxlen=capacity)

    def add(self, episode: list[Transition]) -> None:
        if not episode:
            raise ValueError("cannot store an empty episode")
        self._episodes.append(list(episode))

    def __len__(self) -> int:
        return len(self._episodes)

    def sample(self, n: int, rng: np.random.Generator) -> list[Transition]:
        if n > len(self._episodes):
            raise ValueError("not enough stored episodes to sample")
        idx = rng.choice(len(self._episodes), size=n, replace=False)
        out: list[Transition] = []
        for i in idx:
            out.extend(self._episodes[i])
        return out


def build_params(rng: np.random.Generator, game: MatrixGameSpec,
                 config: TrainConfig) -> ParameterSet:
    """One shared agent tower plus, for dqmix, the state-conditioned mixer."""
    params = agents.build_agent_params(rng, game.obs_dim, game.n_actions,
                                       config.support.m, hidden=config.hidden)
    if config.algo == "dqmix":
        mixers.build_mixer_params(rng, game.state_dim, game.n_agents,
                                  config.mixer, params)
    return params


class _ConstantView:
    """Read a parameter set as constants so no gradient reaches the target."""

    def __init__(self, params: ParameterSet):
        self._params = params

    def __getitem__(self, name: str) -> Node:
        return dg.constant(self._params[name].value)

    def __contains__(self, name: str) -> bool:
        return name in self._params


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def _stack_features(batch: list[Transition], agent: int, which: str) -> np.ndarray:
    obs = [getattr(tr, which)[agent].features for tr in batch]
    return np.stack(obs)


def _taken_action_masses(params, features: np.ndarray, actions: np.ndarray,
                         m: int, prefix: str = "agent") -> Node:
    logits = agents.agent_logits(params, dg.constant(features), prefix)
    block = dg.pick_action_block(logits, actions, m)
    return dg.activation(block, "softmax")


def global_distribution_node(params, per_agent_features, per_agent_actions,
                             states: np.ndarray, config: TrainConfig,
                             stats: dict | None = None) -> Node:
    """Mixed (B, m) distribution of the taken joint actions."""
    masses = [_taken_action_masses(params, f, a, config.support.m)
              for f, a in zip(per_agent_features, per_agent_actions)]
    if config.algo == "dvdn":
        return mixers.dvdn_mix_graph(masses, config.support, stats)
    return mixers.dqmix_mix_graph(masses, dg.constant(states), params,
                                  config.support, config.mixer, stats)


def _batched_agent_probs(view, features: np.ndarray, n_actions: int, m: int,
                         prefix: str = "agent") -> np.ndarray:
    """(B, n_actions, m) masses, pure numpy."""
    logits = agents.agent_logits(view, dg.constant(features), prefix).value
    blocks = logits.reshape(len(features), n_actions, m)
    shifted = blocks - blocks.max(axis=2, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=2, keepdims=True)


# ---------------------------------------------------------------------------
# Bellman targets
# ---------------------------------------------------------------------------

def _project_rows(masses: np.ndarray, atoms: np.ndarray,
                  support: SupportSpec) -> np.ndarray:
    return dg.graph_project(dg.constant(masses), dg.constant(atoms), support).value


def bellman_target(reward: float, terminal: bool, next_global: np.ndarray | None,
                   support: SupportSpec, gamma: float) -> np.ndarray:
    """Projected one-step return target; a point mass when terminal."""
    if terminal:
        masses = np.zeros((1, support.m))
        masses[0, 0] = 1.0
        atoms = np.full((1, support.m), float(reward))
    else:
        if next_global is None:
            raise ValueError("non-terminal target needs the next distribution")
        masses = np.asarray(next_global, dtype=np.float64)[None, :]
        atoms = reward + gamma * support.atoms()[None, :]
    return _project_rows(masses, atoms, support)[0]


def _batch_targets(batch: list[Transition], target_params: ParameterSet,
                   game: MatrixGameSpec, config: TrainConfig) -> np.ndarray:
    """(B, m) constant targets under the target parameters."""
    support = config.support
    b = len(batch)
    rewards = np.array([tr.reward for tr in batch])
    terminal = np.array([tr.terminal for tr in batch])
    masses = np.zeros((b, support.m))
    masses[:, 0] = 1.0
    atoms = np.repeat(rewards[:, None], support.m, axis=1)
    live = ~terminal
    if live.any():
        view = _ConstantView(target_params)
        rows = [tr for tr in batch if not tr.terminal]
        feats = [np.stack([tr.next_obs[i].features for tr in rows])
                 for i in range(game.n_agents)]
        probs = [_batched_agent_probs(view, f, game.n_actions, support.m)
                 for f in feats]
        greedy = [p @ support.atoms() for p in probs]          # (B', A)
        actions = [np.argmax(g, axis=1) for g in greedy]
        picked = [p[np.arange(len(rows)), a] for p, a in zip(probs, actions)]
        states = np.stack([tr.next_state for tr in rows])
        mass_nodes = [dg.constant(p) for p in picked]
        if config.algo == "dvdn":
            mixed = mixers.dvdn_mix_graph(mass_nodes, support).value
        else:
            mixed = mixers.dqmix_mix_graph(mass_nodes, dg.constant(states),
                                           view, support, config.mixer).value
        masses[live] = mixed
        atoms[live] = rewards[live, None] + config.gamma * support.atoms()[None, :]
    return _project_rows(masses, atoms, support)


def loss_batch(batch: list[Transition], online: ParameterSet,
               target: ParameterSet, game: MatrixGameSpec, config: TrainConfig,
               stats: dict | None = None) -> Node:
    """Mean cross entropy from projected targets to mixed predictions."""
    if not batch:
        raise ValueError("empty batch")
    if config.gamma is None:
        raise ValueError("resolve gamma before computing losses")
    feats = [_stack_features(batch, i, "obs") for i in range(game.n_agents)]
    acts = [np.array([tr.actions[i] for tr in batch]) for i in range(game.n_agents)]
    states = np.stack([tr.state for tr in batch])
    predicted = global_distribution_node(online, feats, acts, states, config, stats)
    targets = _batch_targets(batch, target, game, config)
    return dg.cross_entropy_loss(targets, predicted)


# ---------------------------------------------------------------------------
# Rollouts and evaluation
# ---------------------------------------------------------------------------

def _select_action(params, obs, support: SupportSpec, epsilon: float,
                   n_actions: int, rng: np.random.Generator) -> int:
    # same draw order as agents.epsilon_greedy, but the network forward is
    # skipped on exploration steps (with eps=1 none ever run)
    if rng.random() < epsilon:
        return int(rng.integers(n_actions))
    return agents.greedy_action(agents.agent_forward(obs, params, support))


def run_episode(game: MatrixGameSpec, params: ParameterSet, config: TrainConfig,
                epsilon: float, rng: np.random.Generator) -> list[Transition]:
    episode = []
    last_actions = None
    for t in range(game.horizon):
        obs = envs.observations(game, last_actions)
        actions = tuple(_select_action(params, obs[i], config.support, epsilon,
                                       game.n_actions, rng)
                        for i in range(game.n_agents))
        episode.append(envs.step(game, t, actions, rng, last_actions))
        last_actions = actions
    return episode


def evaluate(params: ParameterSet, game: MatrixGameSpec,
             config: TrainConfig) -> dict:
    """Learned joint-action distributions against the analytic truth at t=0."""
    support = config.support
    truths = oracle.game_truths(game, support)
    obs = envs.observations(game, None)
    state = envs.global_state(game, 0)
    dists = [agents.agent_forward(obs[i], params, support)
             for i in range(game.n_agents)]
    if config.algo == "dqmix":
        layers = [mixers.hypernet_forward(state, i, params, game.n_agents,
                                          config.mixer) for i in (0, 1)]
        tags = [config.mixer.hidden_function, config.mixer.output_function]
    report = {}
    for joint in game.joint_actions():
        masses = [dists[i].probs[joint[i]] for i in range(game.n_agents)]
        if config.algo == "dvdn":
            mixed = mixers.dvdn_mix(masses, support)
        else:
            mixed = mixers.dqmix_mix(masses, layers, tags, support)
        truth = truths[joint]
        report[f"{joint[0]},{joint[1]}"] = {
            "mean": dc.expectation(mixed),
            "variance": dc.variance(mixed),
            "kl_to_oracle": dc.kl_divergence(truth.dist, mixed),
            "cramer_to_oracle": dc.cramer_distance(truth.dist, mixed),
            "probs": mixed.probs.tolist(),
        }
    return report


# ---------------------------------------------------------------------------
# The loop
# ---------------------------------------------------------------------------

def _metric_columns(game: MatrixGameSpec) -> list[str]:
    cols = ["step", "loss", "epsilon", "clipping_rate"]
    for a1, a2 in game.joint_actions():
        cols += [f"mean_{a1}_{a2}", f"var_{a1}_{a2}", f"kl_{a1}_{a2}"]
    return cols


def train(game: MatrixGameSpec, config: TrainConfig, out_dir=None,
          progress=None) -> dict:
    """Run the full loop; returns params, metric rows, and the final report.

    ``progress(update_index, loss, params, target)`` is called after every
    gradient update. Deterministic for a fixed config and seed.
    """
    config = resolve_gamma(config, game)
    rng = np.random.default_rng(config.seed)
    params = build_params(rng, game, config)
    target = params.clone()
    opt = Adam(params, lr=config.lr)
    memory = ReplayMemory(config.replay_capacity)

    rows = []
    steps = 0
    episodes = 0
    updates = 0
    last_loss = math.nan
    last_clip = 0.0
    next_eval = config.eval_every

    def record(step: int) -> None:
        report = evaluate(params, game, config)
        row = {"step": step, "loss": last_loss,
               "epsilon": config.epsilon.value(step), "clipping_rate": last_clip}
        for key, cell in report.items():
            a1, a2 = key.split(",")
            row[f"mean_{a1}_{a2}"] = cell["mean"]
            row[f"var_{a1}_{a2}"] = cell["variance"]
            row[f"kl_{a1}_{a2}"] = cell["kl_to_oracle"]
        rows.append(row)

    while steps < config.total_steps:
        episode = run_episode(game, params, config,
                              config.epsilon.value(steps), rng)
        memory.add(episode)
        steps += len(episode)
        episodes += 1
        if episodes % config.train_every == 0 and len(memory) >= config.batch_episodes:
            batch = memory.sample(config.batch_episodes, rng)
            stats: dict = {}
            params.zero_grad()
            loss = loss_batch(batch, params, target, game, config, stats)
            dg.backward(loss)
            opt.step()
            updates += 1
            last_loss = float(loss.value)
            clips = stats.get("clip_fractions", [])
            last_clip = float(np.mean(clips)) if clips else 0.0
            if updates % config.target_sync == 0:
                dg.sync(params, target)
            if progress is not None:
                progress(updates, last_loss, params, target)
        while next_eval <= steps:
            record(min(next_eval, config.total_steps))
            next_eval += config.eval_every

    final_report = evaluate(params, game, config)
    result = {"params": params, "target": target, "metrics": rows,
              "final_eval": final_report, "updates": updates, "steps": steps}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics(out / "metrics.csv", rows, game)
        params.save(out / "checkpoint.json")
        with open(out / "final_eval.json", "w") as fh:
            json.dump({"algo": config.algo, "steps": steps,
                       "report": final_report}, fh, indent=2)
        result["out_dir"] = str(out)
    return result


def write_metrics(path, rows: list[dict], game: MatrixGameSpec) -> None:
    cols = _metric_columns(game)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            # plain-float repr round-trips exactly and is stable across runs
            writer.writerow({c: repr(float(row[c])) if isinstance(row[c], float)
                             else row[c] for c in cols})
