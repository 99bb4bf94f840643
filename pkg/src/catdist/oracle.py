"""Ground-truth references the learned models are judged against.

Everything here is computed by an independent route: Gaussian CDF binning for
reward discretization, recursive discounted convolution for multi-step
returns, and scalar outcome enumeration for the mixing layers. None of it
shares code with the graph implementations beyond the distcore value types.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import find_peaks
from scipy.special import ndtr

from . import distcore as dc
from .distcore import CategoricalDistribution, SupportSpec
from .envs import MatrixGameSpec, RewardSpec
from .mixers import MixerLayerParams


def discretize_reward(reward: RewardSpec, support: SupportSpec) -> CategoricalDistribution:
    """Bin a Gaussian mixture by CDF differences at half-grid edges.

    Interior bin j collects the mixture mass between z_j - delta/2 and
    z_j + delta/2; the first and last bins absorb the open tails, so the
    total mass is exactly one. A zero-variance component degenerates to its
    bin's atom.
    """
    atoms = support.atoms()
    edges = np.concatenate([[-np.inf],
                            (atoms[:-1] + atoms[1:]) / 2.0,
                            [np.inf]])
    probs = np.zeros(support.m)
    for w, mu, var in reward.components:
        if var > 0:
            cdf = ndtr((edges - mu) / math.sqrt(var))
        else:
            cdf = (edges >= mu).astype(np.float64)
        probs += w * np.diff(cdf)
    return CategoricalDistribution(atoms, probs / probs.sum())


def true_return_distribution(game: MatrixGameSpec, joint_action,
                             support: SupportSpec,
                             policy=None) -> CategoricalDistribution:
    """Discretized distribution of the discounted return.

    ``policy(t) -> joint action`` fixes the actions of steps after the first;
    by default the same joint action repeats. The return is built backwards:
    the final step's discretized reward, then repeatedly discount (weight by
    gamma, project), convolve with the earlier step's reward, and project.
    """
    joint_action = (int(joint_action[0]), int(joint_action[1]))
    if policy is None:
        policy = lambda t: joint_action
    actions = [joint_action] + [policy(t) for t in range(1, game.horizon)]
    acc = discretize_reward(game.payoff[actions[-1]], support)
    for t in range(game.horizon - 2, -1, -1):
        discounted = dc.project(dc.weighting(acc, game.gamma), support)
        step_reward = discretize_reward(game.payoff[actions[t]], support)
        acc = dc.project(dc.convolve(step_reward, discounted), support)
    return acc


@dataclass(frozen=True)
class DiscretizedTruth:
    """Discretized return distribution plus the continuous mixture's moments."""

    dist: CategoricalDistribution
    mean: float
    variance: float


def game_truths(game: MatrixGameSpec, support: SupportSpec) -> dict:
    """DiscretizedTruth per joint action, under action-repeating rollouts."""
    out = {}
    for joint in game.joint_actions():
        reward = game.payoff[joint]
        mean = sum(game.gamma ** t * reward.mean() for t in range(game.horizon))
        var = sum(game.gamma ** (2 * t) * reward.variance()
                  for t in range(game.horizon))
        out[joint] = DiscretizedTruth(
            dist=true_return_distribution(game, joint, support),
            mean=mean, variance=var)
    return out


# ---------------------------------------------------------------------------
# Mixing-layer enumeration oracle
# ---------------------------------------------------------------------------

def _point_split(x: float, support: SupportSpec):
    """Hat-function split of a single point mass onto the grid."""
    atoms = support.atoms()
    c = min(max(x, support.v_min), support.v_max)
    pos = (c - support.v_min) / support.delta
    near = min(max(int(round(pos)), 0), support.m - 1)
    if c == atoms[near]:
        return ((near, 1.0),)
    lo = min(max(int(math.floor(pos)), 0), support.m - 2)
    frac = pos - lo
    return ((lo, 1.0 - frac), (lo + 1, frac))


def brute_force_mix(masses, layer: MixerLayerParams, f: str,
                    support: SupportSpec) -> list[np.ndarray]:
    """Push every atom combination through one mixing layer as scalars.

    Mirrors the layer semantics outcome by outcome: each input atom is
    weighted and split onto the grid (the intermediate projection), every
    split combination is summed, biased, transformed, and projected once at
    the layer end. Exponential in the number of inputs; a test oracle only.
    """
    masses = [np.asarray(p, dtype=np.float64) for p in masses]
    atoms = support.atoms()
    m = support.m
    n_in = len(masses)
    fn = dc.FUNCTIONS[f]
    outputs = []
    for j in range(layer.n_out):
        split_tables = []
        for i in range(n_in):
            w = float(layer.weights[j, i])
            split_tables.append([_point_split(w * float(x), support) for x in atoms])
        out = np.zeros(m)
        b = float(layer.biases[j])
        for idxs in itertools.product(range(m), repeat=n_in):
            p_comb = 1.0
            for i, k in enumerate(idxs):
                p_comb *= masses[i][k]
            if p_comb == 0.0:
                continue
            for choice in itertools.product(*[split_tables[i][idxs[i]]
                                              for i in range(n_in)]):
                frac = 1.0
                total = b
                for k, fr in choice:
                    frac *= fr
                    total += atoms[k]
                value = float(fn(np.float64(total)))
                for k, fr in _point_split(value, support):
                    out[k] += p_comb * frac * fr
        outputs.append(out)
    return outputs


# ---------------------------------------------------------------------------
# Demonstrations and diagnostics
# ---------------------------------------------------------------------------

def correlated_reward_demo() -> dict:
    """Anticorrelated team reward where additive factorization must fail.

    Both agents earn +-1 with equal probability but always with opposite
    signs, so the team reward is exactly 0. Treating the marginals as
    independent and convolving spreads half the mass to +-2; the KL from the
    true point mass to the factored estimate is log 2 no matter the samples.
    """
    coin = CategoricalDistribution(np.array([-1.0, 1.0]), np.array([0.5, 0.5]))
    factored = dc.convolve(coin, coin)
    truth = CategoricalDistribution(factored.atoms, np.array([0.0, 1.0, 0.0]))
    kl = dc.kl_divergence(truth, factored)
    return {
        "atoms": factored.atoms.tolist(),
        "factored_probs": factored.probs.tolist(),
        "true_probs": truth.probs.tolist(),
        "kl_truth_vs_factored": kl,
        "expected_kl": math.log(2.0),
    }


def triangular_rebin(dist: CategoricalDistribution,
                     ref: SupportSpec) -> CategoricalDistribution:
    """Re-express a uniform-grid distribution on a finer reference grid.

    Each atom's mass spreads over the reference atoms under the triangular
    kernel of the source spacing, i.e. the density the atom stands for under
    hat-function projection. This keeps distributions learned on different
    grid resolutions comparable: projecting a coarse vector onto a fine grid
    directly would park all mass on a handful of fine atoms and any KL
    against a smooth truth would be dominated by the empty atoms in between.
    """
    delta = dist.spacing
    if delta is None:
        raise ValueError("triangular rebinning requires uniform spacing")
    xr = ref.atoms()
    kernel = np.maximum(0.0, 1.0 - np.abs(xr[None, :] - dist.atoms[:, None])
                        / delta)
    sums = kernel.sum(axis=1, keepdims=True)
    if np.any(sums == 0.0):
        raise ValueError("reference grid does not cover the source support")
    out = dist.probs @ (kernel / sums)            # edge atoms keep full mass
    return CategoricalDistribution(xr, out / out.sum())


def reference_kl(game: MatrixGameSpec, joint_action,
                 learned: CategoricalDistribution, ref: SupportSpec) -> float:
    """KL from the true return to the learned one, on a shared fine grid."""
    truth = true_return_distribution(game, joint_action, ref)
    return dc.kl_divergence(truth, triangular_rebin(learned, ref))


def count_modes(mass: np.ndarray, rel_prominence: float = 0.01) -> int:
    """Number of visible interior local maxima of a mass vector.

    A peak counts when its prominence reaches ``rel_prominence`` of the
    largest mass; sub-noise wiggle in near-zero tails does not.
    """
    mass = np.asarray(mass, dtype=np.float64)
    peak = mass.max()
    if peak <= 0:
        return 0
    # zero padding lets maxima on the first or last atom register
    padded = np.concatenate([[0.0], mass, [0.0]])
    idx, _ = find_peaks(padded, prominence=rel_prominence * peak)
    return int(idx.size)
