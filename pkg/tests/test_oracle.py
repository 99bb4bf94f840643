import math

import numpy as np
import pytest

from catdist import distcore as dc
from catdist import envs, mixers, oracle
from catdist.distcore import SupportSpec
from catdist.envs import MatrixGameSpec, RewardSpec

SUP = SupportSpec(-10.0, 20.0, 51)


class TestDiscretizeReward:
    def test_mass_sums_to_one(self):
        d = oracle.discretize_reward(RewardSpec(((1.0, 3.0, 1.0),)), SUP)
        assert d.probs.sum() == pytest.approx(1.0, abs=1e-15)

    def test_moments_match_when_tails_are_negligible(self):
        # support edges sit 13+ sigma away, so only grid rounding remains
        d = oracle.discretize_reward(RewardSpec(((1.0, 3.0, 1.0),)), SUP)
        assert dc.expectation(d) == pytest.approx(3.0, abs=1e-6)
        assert dc.variance(d) == pytest.approx(1.0 + SUP.delta ** 2 / 12, abs=1e-2)

    def test_zero_variance_becomes_nearest_atom(self):
        d = oracle.discretize_reward(RewardSpec(((1.0, 3.0, 0.0),)), SUP)
        # 3 lies between atoms 2.6 and 3.2, nearer 3.2
        assert d.probs[22] == 1.0

    def test_far_tail_collects_at_boundary(self):
        d = oracle.discretize_reward(RewardSpec(((1.0, 100.0, 1.0),)), SUP)
        assert d.probs[-1] == pytest.approx(1.0)

    def test_matches_monte_carlo_binning(self):
        reward = RewardSpec(((0.5, 1.0, 2.0), (0.5, 8.0, 2.0)))
        d = oracle.discretize_reward(reward, SUP)
        rng = np.random.default_rng(12)
        draws = np.array([reward.sample(rng) for _ in range(200000)])
        nearest = np.clip(np.rint((draws - SUP.v_min) / SUP.delta), 0, SUP.m - 1)
        counts = np.bincount(nearest.astype(int), minlength=SUP.m) / draws.size
        assert np.abs(counts - d.probs).sum() < 0.01

    def test_bimodal_mode_count(self):
        d = oracle.discretize_reward(RewardSpec(((0.5, 1.0, 2.0), (0.5, 8.0, 2.0))), SUP)
        assert oracle.count_modes(d.probs) == 2


class TestTrueReturn:
    def test_horizon_one_is_plain_discretization(self):
        game = envs.default_matrix_game()
        for joint in game.joint_actions():
            got = oracle.true_return_distribution(game, joint, SUP)
            want = oracle.discretize_reward(game.payoff[joint], SUP)
            np.testing.assert_array_equal(got.probs, want.probs)

    def test_two_step_moments(self):
        game = MatrixGameSpec(payoff=envs.default_matrix_game().payoff,
                              horizon=2, gamma=0.9)
        d = oracle.true_return_distribution(game, (1, 0), SUP)
        # r0 + 0.9 r1 with both N(3,2): mean 5.7 exactly (projection keeps
        # in-range means), variance 2 + 0.81*2 = 3.62 plus at most grid smear
        assert dc.expectation(d) == pytest.approx(5.7, abs=1e-9)
        assert 3.61 <= dc.variance(d) <= 3.62 + SUP.delta ** 2
    def test_two_step_against_direct_discretization(self):
        game = MatrixGameSpec(payoff=envs.default_matrix_game().payoff,
                              horizon=2, gamma=0.9)
        d = oracle.true_return_distribution(game, (1, 0), SUP)
        direct = oracle.discretize_reward(RewardSpec(((1.0, 5.7, 3.62),)), SUP)
        assert dc.cramer_distance(d, direct) < 0.05

    def test_policy_argument_controls_later_steps(self):
        game = MatrixGameSpec(payoff=envs.default_matrix_game().payoff,
                              horizon=2, gamma=0.9)
        d = oracle.true_return_distribution(game, (0, 0), SUP,
                                            policy=lambda t: (1, 0))
        # r0 ~ N(0,2), r1 ~ N(3,2): mean 0 + 0.9*3
        assert dc.expectation(d) == pytest.approx(2.7, abs=1e-9)

    def test_game_truths_table(self):
        game = envs.default_matrix_game()
        truths = oracle.game_truths(game, SUP)
        assert set(truths) == set(game.joint_actions())
        t = truths[(1, 1)]
        assert t.mean == pytest.approx(4.5)
        assert t.variance == pytest.approx(14.25)
        assert dc.expectation(t.dist) == pytest.approx(4.5, abs=1e-6)


class TestPointSplit:
    def test_on_atom_is_whole(self):
        assert oracle._point_split(-10.0, SUP) == ((0, 1.0),)
        assert oracle._point_split(20.0, SUP) == ((50, 1.0),)

    def test_midpoint_splits_evenly(self):
        ((lo, a), (hi, b)) = oracle._point_split(-9.7, SUP)
        assert (lo, hi) == (0, 1)
        assert a == pytest.approx(0.5) and b == pytest.approx(0.5)

    def test_clipping(self):
        assert oracle._point_split(99.0, SUP) == ((50, 1.0),)
        assert oracle._point_split(-99.0, SUP) == ((0, 1.0),)


class TestBruteForceMix:
    def test_against_exact_layer(self):
        rng = np.random.default_rng(13)
        sup = SupportSpec(-2.0, 3.0, 7)
        worst = 0.0
        for trial in range(100):
            n_in = int(rng.integers(1, 4))
            n_out = int(rng.integers(1, 3))
            masses = [p for p in np.random.default_rng(trial).random((n_in, sup.m))]
            masses = [p / p.sum() for p in masses]
            layer = mixers.MixerLayerParams(rng.random((n_out, n_in)) * 2.0,
                                            rng.normal(0, 1, n_out))
            f = ["identity", "relu", "elu"][trial % 3]
            got = mixers.dqmix_layer(masses, layer, f, sup)
            want = oracle.brute_force_mix(masses, layer, f, sup)
            for g, w in zip(got, want):
                worst = max(worst, float(np.abs(np.asarray(g) - w).max()))
        assert worst < 1e-10

    def test_zero_weight_layer(self):
        sup = SupportSpec(-2.0, 3.0, 7)
        p = np.full(sup.m, 1 / sup.m)
        layer = mixers.MixerLayerParams(np.zeros((1, 2)), np.array([1.25]))
        (got,) = mixers.dqmix_layer([p, p], layer, "identity", sup)
        (want,) = oracle.brute_force_mix([p, p], layer, "identity", sup)
        np.testing.assert_allclose(got, want, atol=1e-12)
        assert dc.expectation(dc.CategoricalDistribution.from_support(sup, got)) \
            == pytest.approx(1.25)


class TestReferenceGrid:
    REF = SupportSpec(-10.0, 20.0, 601)

    def test_rebin_conserves_mass_and_mean(self):
        d = oracle.discretize_reward(RewardSpec(((1.0, 3.0, 1.0),)), SUP)
        r = oracle.triangular_rebin(d, self.REF)
        assert r.probs.sum() == pytest.approx(1.0, abs=1e-12)
        assert dc.expectation(r) == pytest.approx(dc.expectation(d), abs=1e-6)

    def test_rebin_spreads_over_kernel_width(self):
        # a single coarse atom becomes a triangle of fine atoms, not a spike
        sup = SupportSpec(-10.0, 20.0, 5)
        point = dc.CategoricalDistribution.from_support(
            sup, np.array([0.0, 0.0, 1.0, 0.0, 0.0]))
        r = oracle.triangular_rebin(point, self.REF)
        assert (r.probs > 1e-9).sum() > 200   # kernel half-width 7.5 = 150 bins
        assert r.probs.max() < 0.01

    def test_rebin_requires_overlap(self):
        d = oracle.discretize_reward(RewardSpec(((1.0, 3.0, 1.0),)), SUP)
        with pytest.raises(ValueError, match="cover"):
            oracle.triangular_rebin(d, SupportSpec(100.0, 120.0, 11))

    def test_reference_kl_floors_decrease_with_atom_count(self):
        # the truth binned at m, judged on the shared fine grid: the
        # irreducible representation error per atom count
        game = envs.default_matrix_game()
        floors = {}
        for m in (5, 11, 25, 51, 75):
            sup = SupportSpec(-10.0, 20.0, m)
            tm = oracle.true_return_distribution(game, (1, 1), sup)
            floors[m] = oracle.reference_kl(game, (1, 1), tm, self.REF)
        assert floors[5] == pytest.approx(0.487437, abs=1e-4)
        assert floors[51] == pytest.approx(0.000483, abs=1e-5)
        assert sorted(floors.values(), reverse=True) == list(floors.values())

    def test_reference_kl_zero_for_matching_fine_grids(self):
        game = envs.default_matrix_game()
        truth = oracle.true_return_distribution(game, (0, 0), self.REF)
        assert oracle.reference_kl(game, (0, 0), truth, self.REF) < 2e-3


class TestDemoAndModes:
    def test_correlated_demo_kl_is_log_two(self):
        report = oracle.correlated_reward_demo()
        assert report["kl_truth_vs_factored"] == pytest.approx(math.log(2), abs=1e-12)
        assert report["atoms"] == [-2.0, 0.0, 2.0]
        assert report["factored_probs"] == [0.25, 0.5, 0.25]
        assert report["true_probs"] == [0.0, 1.0, 0.0]

    def test_count_modes_basic(self):
        assert oracle.count_modes(np.array([0.0, 1.0, 0.0, 2.0, 0.0])) == 2
        assert oracle.count_modes(np.array([0.1, 0.2, 0.7])) == 1
        assert oracle.count_modes(np.array([0.7, 0.2, 0.1])) == 1
        assert oracle.count_modes(np.zeros(5)) == 0

    def test_count_modes_prominence_filter(self):
        # dip of 1e-4 against peaks near 0.3 is below the 1% threshold
        assert oracle.count_modes(np.array([0.31, 0.2999, 0.3])) == 1
        assert oracle.count_modes(np.array([0.31, 0.25, 0.3])) == 2
