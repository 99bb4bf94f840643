"""Runtime re-verification suites exposed through the command line.

Each suite re-derives a handful of core guarantees with fresh random draws:
operation closure, argmax invariance under the mixing stages, gradient
fidelity, and oracle agreement. They are condensed versions of the test
suite meant for quick field checks of an installed build.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffgraph as dg
from . import distcore as dc
from . import envs, mixers, oracle
from .distcore import CategoricalDistribution, SupportSpec


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _result(name: str, passed, detail: str = "") -> CheckResult:
    return CheckResult(name, bool(passed), detail)


def _random_dist(rng, support: SupportSpec) -> CategoricalDistribution:
    p = rng.random(support.m) + 1e-3
    return CategoricalDistribution.from_support(support, p / p.sum())


def check_distcore(rng: np.random.Generator,
                   corrupt_convolution: bool = False) -> list[CheckResult]:
    sup = SupportSpec(-3.0, 5.0, 9)

    def convolve(x, y):
        out = dc.convolve(x, y)
        if corrupt_convolution:
            probs = out.probs.copy()
            probs[0] += 1e-3
            probs /= probs.sum()
            out = CategoricalDistribution(out.atoms, probs)
        return out

    results = []
    worst_mass = 0.0
    worst_conv = 0.0
    for _ in range(200):
        x = _random_dist(rng, sup)
        y = _random_dist(rng, sup)
        z = convolve(x, y)
        worst_mass = max(worst_mass, abs(z.probs.sum() - 1.0))
        want = np.zeros(2 * sup.m - 1)
        for i, pi in enumerate(x.probs):
            for j, pj in enumerate(y.probs):
                want[i + j] += pi * pj
        worst_conv = max(worst_conv, float(np.abs(z.probs - want).max()))
        proj = dc.project(dc.weighting(x, float(rng.uniform(-2, 2))), sup)
        worst_mass = max(worst_mass, abs(proj.probs.sum() - 1.0))
    results.append(_result("mass conservation", worst_mass < 1e-9,
                           f"worst {worst_mass:.2e}"))
    results.append(_result("convolution vs direct enumeration",
                           worst_conv < 1e-12, f"worst {worst_conv:.2e}"))

    p = rng.random(sup.m)
    p[-1] = 0.0   # keep the shifted top atom inside the support
    x = CategoricalDistribution.from_support(sup, p / p.sum())
    mid = dc.expectation(dc.project(dc.bias(x, 0.37), sup))
    results.append(_result("projection preserves in-range means",
                           abs(mid - dc.expectation(x) - 0.37) < 1e-9))
    return results


def _fsd_pair(rng, m):
    worse = rng.random(m) + 0.05
    worse /= worse.sum()
    cdf = np.cumsum(worse)
    s = rng.uniform(0.3, 0.7)
    better = np.diff(np.concatenate([cdf[:-1] * s, [1.0]]), prepend=0.0)
    return worse, better


def check_digm(rng: np.random.Generator) -> list[CheckResult]:
    sup = SupportSpec(-4.0, 6.0, 11)
    results = []

    failures = 0
    for _ in range(200):
        x = _random_dist(rng, sup)
        y = _random_dist(rng, sup)
        w = float(rng.uniform(0.05, 3.0))
        b = float(rng.normal(0, 2))
        order = dc.expectation(x) > dc.expectation(y)
        for op in (lambda d: dc.weighting(d, w), lambda d: dc.bias(d, b)):
            if (dc.expectation(op(x)) > dc.expectation(op(y))) != order:
                failures += 1
    results.append(_result("positive weighting and bias keep argmax", failures == 0,
                           f"{failures} failures"))

    failures = 0
    for _ in range(200):
        worse, better = _fsd_pair(rng, sup.m)
        layers = [mixers.MixerLayerParams(rng.uniform(0.2, 1.0, (2, 1)),
                                          rng.normal(0, 0.5, 2)),
                  mixers.MixerLayerParams(rng.uniform(0.2, 1.0, (1, 2)),
                                          rng.normal(0, 0.5, 1))]
        ew = dc.expectation(mixers.dqmix_mix([worse], layers, ["elu", "identity"], sup))
        eb = dc.expectation(mixers.dqmix_mix([better], layers, ["elu", "identity"], sup))
        if not eb > ew:
            failures += 1
    results.append(_result("monotone mix keeps dominance order", failures == 0,
                           f"{failures} failures"))
    return results


def check_gradients(rng: np.random.Generator) -> list[CheckResult]:
    sup = SupportSpec(-1.7, 3.3, 6)
    h = 1e-5
    masses = rng.random((2, sup.m))
    masses /= masses.sum(axis=1, keepdims=True)
    atoms = np.sort(rng.uniform(-2.5, 4.5, (2, sup.m)), axis=1)
    target = rng.random((2, sup.m))
    target /= target.sum(axis=1, keepdims=True)

    def loss_value(mass_arr):
        node = dg.graph_project(dg.constant(mass_arr), dg.constant(atoms), sup)
        return float(dg.cross_entropy_loss(target, node).value)

    p = dg.parameter(masses.copy())
    node = dg.graph_project(p, dg.constant(atoms), sup)
    dg.backward(dg.cross_entropy_loss(target, node))
    numeric = np.zeros_like(masses)
    flat = masses.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = loss_value(masses)
        flat[i] = keep - h
        down = loss_value(masses)
        flat[i] = keep
        nflat[i] = (up - down) / (2 * h)
    scale = max(np.abs(p.grad).max(), np.abs(numeric).max(), 1e-8)
    rel = float(np.abs(p.grad - numeric).max() / scale)
    return [_result("projection gradient vs finite differences", rel < 1e-4,
                    f"rel err {rel:.2e}")]


def check_oracle(rng: np.random.Generator) -> list[CheckResult]:
    sup = SupportSpec(-2.0, 3.0, 7)
    results = []
    worst = 0.0
    for trial in range(20):
        n_in = int(rng.integers(1, 4))
        masses = [p / p.sum() for p in rng.random((n_in, sup.m))]
        layer = mixers.MixerLayerParams(rng.random((1, n_in)) * 1.5,
                                        rng.normal(0, 1, 1))
        f = ["identity", "relu", "elu"][trial % 3]
        (got,) = mixers.dqmix_layer(masses, layer, f, sup)
        (want,) = oracle.brute_force_mix(masses, layer, f, sup)
        worst = max(worst, float(np.abs(np.asarray(got) - want).max()))
    results.append(_result("mixing layer vs scalar enumeration", worst < 1e-8,
                           f"worst {worst:.2e}"))

    game = envs.default_matrix_game()
    big = SupportSpec(-10.0, 20.0, 51)
    t = oracle.game_truths(game, big)[(1, 1)]
    results.append(_result("bimodal truth has two modes",
                           oracle.count_modes(t.dist.probs) == 2))
    demo = oracle.correlated_reward_demo()
    results.append(_result("anticorrelated demo KL equals log 2",
                           abs(demo["kl_truth_vs_factored"] - np.log(2)) < 1e-9))
    return results


SUITES = {
    "distcore": check_distcore,
    "digm": check_digm,
    "gradients": check_gradients,
    "oracle": check_oracle,
}


def run_suite(name: str, seed: int = 0,
              corrupt_convolution: bool = False) -> list[CheckResult]:
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; available: {sorted(SUITES)}")
    rng = np.random.default_rng(seed)
    if name == "distcore":
        return check_distcore(rng, corrupt_convolution=corrupt_convolution)
    return SUITES[name](rng)
