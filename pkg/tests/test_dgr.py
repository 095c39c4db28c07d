"""Tests for dynamic granularity rollout."""

import math

import numpy as np
import pytest

from flowrft.dgr import (
    GranularitySchedule,
    MissingVelocityError,
    cache_velocities,
    coarse_progress_perception,
    count_step_units,
    dual_group_loss,
    init_group_noises,
    refine_fine_grained,
    schedule_granularity,
    select_representatives,
)
from flowrft.groups import Granularity, RolloutGroup, WindowViolationError
from flowrft.model import ModelArch, VelocityModel
from flowrft.objectives import ClipConfig, group_advantages
from flowrft.rewards import group_diversity
from flowrft.sde import NoiseSchedule, rollout
from flowrft.seeding import KeyedRNG, Stream, keyed_rng
from flowrft.trajectory import TimeGrid


class TestGranularitySchedule:
    def test_period_split(self):
        sched = GranularitySchedule.from_ratio(40, 0.25)
        assert (sched.fine_steps, sched.coarse_steps) == (30, 10)
        assert schedule_granularity(29, sched) == Granularity.FINE
        assert schedule_granularity(30, sched) == Granularity.COARSE
        assert schedule_granularity(39, sched) == Granularity.COARSE
        assert schedule_granularity(40, sched) == Granularity.FINE

    def test_pinned_modes(self):
        fine = GranularitySchedule.from_ratio(40, 0.25, mode="fine")
        coarse = GranularitySchedule.from_ratio(40, 0.25, mode="coarse")
        assert {schedule_granularity(i, fine) for i in range(40)} == {Granularity.FINE}
        assert {schedule_granularity(i, coarse) for i in range(40)} == {Granularity.COARSE}

    def test_dynamic_needs_both_kinds(self):
        with pytest.raises(ValueError, match="at least one fine and one coarse"):
            GranularitySchedule.from_ratio(40, 0.0)

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="Unknown schedule mode"):
            GranularitySchedule(mode="random")

    def test_negative_iteration(self):
        with pytest.raises(ValueError, match="iteration"):
            schedule_granularity(-1, GranularitySchedule())


class TestInitialNoise:
    def test_fine_group_shares_one_noise(self):
        noises = init_group_noises(Granularity.FINE, 4, 2, KeyedRNG(0, Stream.INIT_NOISE, (0, 0)))
        assert all(np.array_equal(n, noises[0]) for n in noises)

    def test_coarse_group_draws_independently(self):
        noises = init_group_noises(Granularity.COARSE, 4, 2, KeyedRNG(0, Stream.INIT_NOISE, (0, 0)))
        assert len({tuple(n) for n in noises}) == 4

    def test_coarse_draws_have_identity_covariance(self):
        groups = [init_group_noises(Granularity.COARSE, 4, 2, KeyedRNG(0, Stream.INIT_NOISE, (g, 0)))
                  for g in range(2500)]
        draws = np.array([n for group in groups for n in group])
        assert draws.shape == (10_000, 2)
        cov = np.cov(draws, rowvar=False)
        # four standard errors: sqrt(2/n) on the diagonal, sqrt(1/n) off it
        assert np.all(np.abs(np.diag(cov) - 1.0) < 4.0 * math.sqrt(2.0 / len(draws)))
        assert abs(cov[0, 1]) < 4.0 / math.sqrt(len(draws))
        members = np.array(groups)
        cross = np.mean(members[:, 0, :] * members[:, 1, :])
        assert abs(cross) < 4.0 / math.sqrt(members.shape[0] * 2)

    def test_fine_members_are_fully_correlated(self):
        groups = np.array([init_group_noises(Granularity.FINE, 4, 2, KeyedRNG(0, Stream.INIT_NOISE, (g, 0)))
                           for g in range(200)])
        for k in range(1, 4):
            assert np.array_equal(groups[:, k, :], groups[:, 0, :])
        assert np.cov(groups[:, 0, 0], groups[:, 3, 0])[0, 1] == pytest.approx(np.var(groups[:, 0, 0], ddof=1))

    def test_group_too_small(self):
        with pytest.raises(ValueError, match="K >= 2"):
            init_group_noises(Granularity.COARSE, 1, 2, KeyedRNG(0, Stream.INIT_NOISE))


class TestPerception:
    def test_needs_cached_velocity(self, tiny_model):
        trajs = rollout(tiny_model, [np.zeros(2)] * 2, TimeGrid.build(8, 3.0), 0, NoiseSchedule(0.3),
                        KeyedRNG(0, Stream.SDE), stop_at=4)
        with pytest.raises(MissingVelocityError, match="no cached velocity"):
            coarse_progress_perception(tiny_model, trajs)

    def test_single_step_estimate(self, tiny_model):
        grid = TimeGrid.build(8, 3.0)
        trajs = rollout(tiny_model, [np.ones(2)] * 2, grid, 0, NoiseSchedule(0.3), KeyedRNG(0, Stream.SDE),
                        stop_at=4)
        cache_velocities(tiny_model, trajs)
        perceptions = coarse_progress_perception(tiny_model, trajs)
        x = trajs[0].states[4]
        expected = x - grid.t(4) * tiny_model.velocity(x, grid.t(4), 0)
        assert perceptions[0] == pytest.approx(expected)
        assert trajs[0].coarse_knot == 4

    def test_complete_trajectory_perceives_itself(self, tiny_model):
        trajs = rollout(tiny_model, [np.ones(2)], TimeGrid.build(4, 3.0), 0, NoiseSchedule(0.3),
                        KeyedRNG(0, Stream.SDE))
        assert np.array_equal(coarse_progress_perception(tiny_model, trajs)[0], trajs[0].endpoint)


class TestSelection:
    def test_one_representative_per_tight_cluster(self):
        perceptions = [np.array(p) for p in ([0.0, 0.0], [0.01, 0.0], [10.0, 10.0], [10.0, 10.01])]
        result = select_representatives(perceptions, 2, keyed_rng(0, Stream.SELECTION, 0))
        assert len(result.g1_indices) == 2
        assert {i // 2 for i in result.g1_indices} == {0, 1}
        assert sorted(result.g1_indices + result.g2_indices) == [0, 1, 2, 3]

    def test_full_selection(self):
        perceptions = [np.array([float(i), 0.0]) for i in range(4)]
        result = select_representatives(perceptions, 4, keyed_rng(0, Stream.SELECTION, 0))
        assert result.g1_indices == [0, 1, 2, 3]
        assert result.g2_indices == []

    def test_covers_more_than_top_rewards(self):
        # the three best-rewarded samples sit together near the target
        perceptions = [np.array(p) for p in (
            [0.0, 0.0], [0.01, 0.0], [0.0, 0.01], [10.0, 10.0], [10.0, 10.01], [-10.0, 10.0],
        )]
        rewards = np.array([-np.linalg.norm(p) for p in perceptions])
        top = np.argsort(-rewards)[:3]
        result = select_representatives(perceptions, 3, keyed_rng(0, Stream.SELECTION, 0))
        chosen = group_diversity([perceptions[i] for i in result.g1_indices])
        assert chosen >= group_diversity([perceptions[i] for i in top])

    def test_feature_map_and_tag(self):
        perceptions = [np.array([float(i), 0.0]) for i in range(4)]
        result = select_representatives(perceptions, 2, keyed_rng(0, Stream.SELECTION, 0),
                                        feature_map=lambda p: p[:1], feature_tag="x-only")
        assert result.feature_tag == "x-only"
        assert result.centers.shape == (2, 1)


class TestIntraGroupRollout:
    """Window rollout, selection and refinement of one group."""

    @pytest.mark.parametrize("ts, units", [(4, 168), (12, 120)])
    def test_step_unit_saving(self, ts, units):
        model = VelocityModel.from_arch(ModelArch(hidden_widths=(8,), time_embed_dim=2, cond_dim=2), seed=0)
        grid = TimeGrid.build(16, 3.0)
        sched = NoiseSchedule(0.3)
        K, K1 = 12, 6
        init = init_group_noises(Granularity.COARSE, K, 2, KeyedRNG(0, Stream.INIT_NOISE, (0,)))
        rng = KeyedRNG(0, Stream.SDE, (0,))
        trajs = rollout(model, init, grid, 0, sched, rng, stop_at=ts)
        cache_velocities(model, trajs)
        selection = select_representatives(coarse_progress_perception(model, trajs), K1,
                                           keyed_rng(0, Stream.SELECTION, 0))
        refine_fine_grained(model, [trajs[i] for i in selection.g1_indices], selection.g1_indices, sched, rng)

        assert count_step_units(trajs) == units == K * (grid.T - ts) + K1 * ts
        assert units < K * grid.T == 192
        assert all(trajs[i].is_complete for i in selection.g1_indices)
        assert all(trajs[i].stop == ts for i in selection.g2_indices)

    def test_refinement_continues_the_same_streams(self, tiny_model):
        grid = TimeGrid.build(8, 3.0)
        sched = NoiseSchedule(0.4)
        init = init_group_noises(Granularity.COARSE, 3, 2, KeyedRNG(1, Stream.INIT_NOISE))
        rng = KeyedRNG(1, Stream.SDE)
        full = rollout(tiny_model, init, grid, 0, sched, rng)
        partial = rollout(tiny_model, init, grid, 0, sched, rng, stop_at=5)
        cache_velocities(tiny_model, partial)
        refine_fine_grained(tiny_model, [partial[2]], [2], sched, rng)
        assert np.array_equal(partial[2].states, full[2].states)


class TestDualGroupLoss:
    def _groups(self, model):
        grid = TimeGrid.build(6, 1.0)
        sched = NoiseSchedule(0.5)
        init = init_group_noises(Granularity.COARSE, 4, 2, KeyedRNG(0, Stream.INIT_NOISE))
        rng = KeyedRNG(0, Stream.SDE)
        trajs = rollout(model, init, grid, 1, sched, rng, stop_at=3)
        cache_velocities(model, trajs)
        perceptions = coarse_progress_perception(model, trajs)
        refine_fine_grained(model, trajs[:2], [0, 1], sched, rng)
        r1 = np.array([0.0, 1.0])
        g1 = RolloutGroup(Granularity.COARSE, 1, trajs[:2], rewards=r1, advantages=group_advantages(r1))
        r2 = np.array([-np.linalg.norm(p) for p in perceptions[2:]])
        g2 = RolloutGroup(Granularity.COARSE, 1, trajs[2:], rewards=r2, advantages=group_advantages(r2),
                          window=(3, 6), reward_source="perception")
        return g1, g2

    def test_on_policy_loss_is_zero(self, tiny_model):
        g1, g2 = self._groups(tiny_model)
        loss = dual_group_loss(tiny_model, tiny_model.frozen_copy(), g1, g2, ClipConfig())
        assert float(loss) == pytest.approx(0.0, abs=1e-12)

    def test_partial_group_only_uses_its_window(self, tiny_model):
        g1, g2 = self._groups(tiny_model)
        assert all(set(g2.eligible_transitions(k)) <= {6, 5, 4} for k in range(len(g2)))

    def test_window_violation(self, tiny_model):
        g1, g2 = self._groups(tiny_model)
        g2.trajectories[0].stop = 1
        with pytest.raises(WindowViolationError, match="below window"):
            dual_group_loss(tiny_model, tiny_model.frozen_copy(), g1, g2, ClipConfig())
