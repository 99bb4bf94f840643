"""Global-distribution constructors: additive and monotone-mixed factorizations.

Two equivalent forms exist side by side. The exact form works on validated
distcore values and is the reference for tests and oracles; the graph form
builds the same computation over batched diffgraph nodes for training. Both
run the same per-layer recipe: weight atoms, project onto the shared grid,
convolve across inputs, shift by a bias, pass atoms through a monotone
function, project again.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffgraph as dg
from . import distcore as dc
from .diffgraph import Node, ParameterSet
from .distcore import CategoricalDistribution, SupportMismatch, SupportSpec


@dataclass(frozen=True)
class MixerLayerParams:
    """One mixing layer: non-negative weights (n_out, n_in) and biases (n_out,)."""

    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        b = np.ascontiguousarray(self.biases, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)
        if w.ndim != 2 or b.ndim != 1:
            raise ValueError("weights must be (n_out, n_in), biases (n_out,)")
        if w.shape[0] != b.size:
            raise ValueError("weights and biases disagree on n_out")
        if np.any(w < 0):
            raise ValueError("mixing weights must be non-negative")

    @property
    def n_out(self) -> int:
        return int(self.weights.shape[0])

    @property
    def n_in(self) -> int:
        return int(self.weights.shape[1])


@dataclass(frozen=True)
class MixerConfig:
    """Shape and activation tags of the two-layer monotone mixer."""

    hidden_units: int = 4
    hidden_function: str = "elu"
    output_function: str = "identity"
    hypernet_hidden: int = 16

    def __post_init__(self):
        if self.hidden_units < 1 or self.hypernet_hidden < 1:
            raise ValueError("layer widths must be positive")
        for tag in (self.hidden_function, self.output_function):
            if tag not in dc.FUNCTIONS:
                raise ValueError(f"unregistered function tag {tag!r}")


def _check_inputs(masses: Sequence[np.ndarray], support: SupportSpec) -> list[np.ndarray]:
    if len(masses) == 0:
        raise ValueError("need at least one input distribution")
    out = []
    for p in masses:
        p = np.asarray(p, dtype=np.float64)
        if p.ndim != 1 or p.size != support.m:
            raise SupportMismatch("input masses must live on the shared support")
        out.append(p)
    return out


def _clip_fraction(mass: np.ndarray, atoms: np.ndarray, support: SupportSpec) -> float:
    """Fraction of probability mass sitting on out-of-range atoms."""
    outside = (atoms < support.v_min) | (atoms > support.v_max)
    total = mass.sum()
    if total <= 0:
        return 0.0
    return float((mass * outside).sum() / total)


# ---------------------------------------------------------------------------
# Exact form
# ---------------------------------------------------------------------------

def dvdn_mix(masses: Sequence[np.ndarray], support: SupportSpec,
             stats: dict | None = None) -> CategoricalDistribution:
    """Additive factorization: convolve all inputs, project once."""
    masses = _check_inputs(masses, support)
    acc = CategoricalDistribution.from_support(support, masses[0])
    for p in masses[1:]:
        acc = dc.convolve(acc, CategoricalDistribution.from_support(support, p))
    if stats is not None:
        stats.setdefault("clip_fractions", []).append(
            _clip_fraction(acc.probs, acc.atoms, support))
    return dc.project(acc, support)


def dqmix_layer(masses: Sequence[np.ndarray], layer: MixerLayerParams, f: str,
                support: SupportSpec, stats: dict | None = None) -> list[np.ndarray]:
    """One monotone mixing layer over mass vectors on the shared support.

    Per output unit: weight each input's atoms, project onto the support,
    convolve the projections, add the unit bias to the atoms, apply the
    monotone function to the atoms, and project back onto the support.
    """
    masses = _check_inputs(masses, support)
    if layer.n_in != len(masses):
        raise ValueError(f"layer expects {layer.n_in} inputs, got {len(masses)}")
    outputs = []
    for j in range(layer.n_out):
        acc = None
        for i, p in enumerate(masses):
            x = CategoricalDistribution.from_support(support, p)
            weighted = dc.weighting(x, float(layer.weights[j, i]))
            if stats is not None:
                stats.setdefault("clip_fractions", []).append(
                    _clip_fraction(weighted.probs, weighted.atoms, support))
            q = dc.project(weighted, support)
            acc = q if acc is None else dc.convolve(acc, q)
        shifted = dc.bias(acc, float(layer.biases[j]))
        transformed = dc.apply_function(shifted, f)
        if stats is not None:
            stats.setdefault("clip_fractions", []).append(
                _clip_fraction(transformed.probs, transformed.atoms, support))
        outputs.append(dc.project(transformed, support).probs)
    return outputs


def dqmix_mix(masses: Sequence[np.ndarray], layers: Sequence[MixerLayerParams],
              functions: Sequence[str], support: SupportSpec,
              stats: dict | None = None) -> CategoricalDistribution:
    """Stack of mixing layers ending in a single global distribution."""
    if len(layers) != len(functions):
        raise ValueError("need one function tag per layer")
    current = list(masses)
    for layer, f in zip(layers, functions):
        current = dqmix_layer(current, layer, f, support, stats)
    if len(current) != 1:
        raise ValueError("final layer must produce exactly one output")
    return CategoricalDistribution.from_support(support, current[0])


# ---------------------------------------------------------------------------
# Hypernetworks
# ---------------------------------------------------------------------------

def build_mixer_params(rng: np.random.Generator, state_dim: int, n_agents: int,
                       cfg: MixerConfig, params: ParameterSet | None = None,
                       prefix: str = "mixer") -> ParameterSet:
    """State-conditioned generators for both mixing layers.

    Layer weights come from single affine maps of the state (made non-negative
    with abs downstream); the final-layer bias comes from a small two-layer
    relu network.
    """
    if params is None:
        params = ParameterSet()
    h = cfg.hidden_units

    def init(fan_in, shape):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    params.add(f"{prefix}/w1/w", init(state_dim, (state_dim, n_agents * h)))
    params.add(f"{prefix}/w1/b", np.zeros(n_agents * h))
    params.add(f"{prefix}/b1/w", init(state_dim, (state_dim, h)))
    params.add(f"{prefix}/b1/b", np.zeros(h))
    params.add(f"{prefix}/w2/w", init(state_dim, (state_dim, h)))
    params.add(f"{prefix}/w2/b", np.zeros(h))
    params.add(f"{prefix}/b2/l0/w", init(state_dim, (state_dim, cfg.hypernet_hidden)))
    params.add(f"{prefix}/b2/l0/b", np.zeros(cfg.hypernet_hidden))
    params.add(f"{prefix}/b2/l1/w", init(cfg.hypernet_hidden, (cfg.hypernet_hidden, 1)))
    params.add(f"{prefix}/b2/l1/b", np.zeros(1))
    return params


def hypernet_nodes(params: ParameterSet, state: Node, prefix: str = "mixer"):
    """Graph nodes (w1, b1, w2, b2) for a batch of states.

    ``w1`` is (B, n_agents*h) laid out as ``j * n_agents + i`` for output unit
    j and input agent i; weight entries are abs-activated, biases are raw.
    """
    w1 = dg.activation(dg.dense(state, params[f"{prefix}/w1/w"],
                                params[f"{prefix}/w1/b"]), "abs")
    b1 = dg.dense(state, params[f"{prefix}/b1/w"], params[f"{prefix}/b1/b"])
    w2 = dg.activation(dg.dense(state, params[f"{prefix}/w2/w"],
                                params[f"{prefix}/w2/b"]), "abs")
    hidden = dg.activation(dg.dense(state, params[f"{prefix}/b2/l0/w"],
                                    params[f"{prefix}/b2/l0/b"]), "relu")
    b2 = dg.dense(hidden, params[f"{prefix}/b2/l1/w"], params[f"{prefix}/b2/l1/b"])
    return w1, b1, w2, b2


def hypernet_forward(state: np.ndarray, layer: int, params: ParameterSet,
                     n_agents: int, cfg: MixerConfig,
                     prefix: str = "mixer") -> MixerLayerParams:
    """Concrete layer parameters for one state vector; layer 0 or 1."""
    state = np.asarray(state, dtype=np.float64)
    if state.ndim != 1:
        raise ValueError("state must be a 1-D vector")
    w1, b1, w2, b2 = hypernet_nodes(params, dg.constant(state[None, :]), prefix)
    h = cfg.hidden_units
    if layer == 0:
        return MixerLayerParams(w1.value[0].reshape(h, n_agents), b1.value[0])
    if layer == 1:
        return MixerLayerParams(w2.value[0].reshape(1, h), b2.value[0])
    raise ValueError(f"layer must be 0 or 1, got {layer}")


# ---------------------------------------------------------------------------
# Graph form
# ---------------------------------------------------------------------------

def _conv_grid(support: SupportSpec, n_in: int) -> np.ndarray:
    return dc.uniform_atoms(n_in * support.v_min, n_in * support.v_max,
                            n_in * (support.m - 1) + 1)


def _collect_clip(stats: dict | None, mass: np.ndarray, atoms: np.ndarray,
                  support: SupportSpec) -> None:
    if stats is None:
        return
    atoms2 = atoms if atoms.ndim == 2 else atoms[None, :]
    outside = (atoms2 < support.v_min) | (atoms2 > support.v_max)
    total = mass.sum()
    frac = float((mass * outside).sum() / total) if total > 0 else 0.0
    stats.setdefault("clip_fractions", []).append(frac)


def dvdn_mix_graph(masses: Sequence[Node], support: SupportSpec,
                   stats: dict | None = None) -> Node:
    """Batched additive mix: (B, M) nodes in, (B, M) node out."""
    acc = masses[0]
    for p in masses[1:]:
        acc = dg.graph_convolve(acc, p)
    grid = _conv_grid(support, len(masses))
    _collect_clip(stats, acc.value, grid, support)
    return dg.graph_project(acc, dg.constant(grid[None, :]), support)


def mix_layer_graph(masses: Sequence[Node], w: Node, b: Node, f: str,
                    support: SupportSpec, n_out: int,
                    stats: dict | None = None) -> list[Node]:
    """Graph twin of :func:`dqmix_layer` with per-row hypernet parameters.

    ``w`` is (B, n_out*n_in) laid out ``j*n_in + i``; ``b`` is (B, n_out).
    """
    n_in = len(masses)
    z = dg.constant(support.atoms()[None, :])
    grid = _conv_grid(support, n_in)
    outputs = []
    for j in range(n_out):
        acc = None
        for i, mass in enumerate(masses):
            w_ij = dg.slice_cols(w, j * n_in + i, j * n_in + i + 1)
            atoms = dg.mul(w_ij, z)
            _collect_clip(stats, mass.value, atoms.value, support)
            q = dg.graph_project(mass, atoms, support)
            acc = q if acc is None else dg.graph_convolve(acc, q)
        biased = dg.add(dg.constant(grid[None, :]), dg.slice_cols(b, j, j + 1))
        transformed = biased if f == "identity" else dg.activation(biased, f)
        _collect_clip(stats, acc.value, transformed.value, support)
        outputs.append(dg.graph_project(acc, transformed, support))
    return outputs


def dqmix_mix_graph(masses: Sequence[Node], state: Node, params: ParameterSet,
                    support: SupportSpec, cfg: MixerConfig,
                    stats: dict | None = None, prefix: str = "mixer") -> Node:
    """Batched two-layer monotone mix conditioned on the global state."""
    w1, b1, w2, b2 = hypernet_nodes(params, state, prefix)
    hidden = mix_layer_graph(masses, w1, b1, cfg.hidden_function, support,
                             cfg.hidden_units, stats)
    out = mix_layer_graph(hidden, w2, b2, cfg.output_function, support, 1, stats)
    return out[0]
