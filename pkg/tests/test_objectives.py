"""Tests for GRPO, DDPO and DPO objectives and group bookkeeping."""

import math

import numpy as np
import pytest
import torch

from flowrft.checks import build_fixture, clipped_region_check, relative_l2, verify_corollaries
from flowrft.groups import (
    Granularity,
    MissingTransitionError,
    RolloutGroup,
    WindowViolationError,
    gather_transitions,
    select_transitions,
)
from flowrft.objectives import (
    ClipConfig,
    DegeneratePairError,
    GroupTooSmallError,
    classify_region,
    ddpo_loss,
    dpo_group_loss,
    dpo_loss,
    grpo_loss,
    grpo_surrogate,
    group_advantages,
    imitation_form_gradient,
    preference_pairs,
)
from flowrft.model import flat_grad
from flowrft.seeding import Stream, keyed_rng


@pytest.fixture(scope="module")
def fixture():
    return build_fixture(seed=0)


class TestGroupAdvantages:
    def test_two_rewards(self):
        assert group_advantages([0.0, 2.0]).advantages == pytest.approx(np.array([-1.0, 1.0]), abs=1e-7)

    def test_equal_rewards_give_zeros(self):
        adv = group_advantages([0.5, 0.5, 0.5])
        assert np.array_equal(adv.advantages, np.zeros(3))

    def test_group_too_small(self):
        with pytest.raises(GroupTooSmallError, match="group too small"):
            group_advantages([1.0])

    def test_advantages_are_clamped(self):
        rewards = [0.0] * 9 + [100.0]
        assert group_advantages(rewards).advantages[-1] == pytest.approx(3.0, rel=1e-6)
        assert group_advantages(rewards, adv_clip=2.0).advantages[-1] == 2.0

    def test_population_statistics(self):
        adv = group_advantages([1.0, 2.0, 3.0, 4.0])
        assert adv.std == pytest.approx(math.sqrt(1.25))
        assert adv.advantages.mean() == pytest.approx(0.0, abs=1e-12)


class TestClip:
    def test_invalid_config(self):
        with pytest.raises(ValueError, match="clip range"):
            ClipConfig(epsilon=0.0)
        with pytest.raises(ValueError, match="advantage cap"):
            ClipConfig(adv_clip=-1.0)

    @pytest.mark.parametrize("ratio, adv, zero", [
        (0.9, -1.0, True),
        (1.1, 1.0, True),
        (0.9, 1.0, False),
        (1.1, -1.0, False),
        (1.0, 1.0, False),
    ])
    def test_flat_regions(self, ratio, adv, zero):
        _, flat = classify_region(ratio, adv, ClipConfig(epsilon=0.05))
        assert flat is zero

    @pytest.mark.parametrize("ratio, adv, expected", [
        (1.2, 1.0, 1.1),
        (0.8, -1.0, -0.9),
        (1.05, 2.0, 2.1),
        (0.5, 1.0, 0.5),
    ])
    def test_surrogate(self, ratio, adv, expected):
        clip = ClipConfig(epsilon=0.1)
        assert grpo_surrogate(ratio, adv, clip) == pytest.approx(expected)
        tensor = grpo_surrogate(torch.tensor(ratio, dtype=torch.float64), adv, clip)
        assert float(tensor) == pytest.approx(expected)


class TestTransitionSelection:
    def test_fraction_keeps_subset(self, fixture):
        sel = select_transitions(fixture.group, 0.6, keyed_rng(0, Stream.TIMESTEPS, 0))
        assert len(sel) == len(fixture.group)
        for k, steps in sel.items():
            assert len(steps) == 3
            assert set(steps) <= set(fixture.group.eligible_transitions(k))

    def test_full_fraction_needs_no_generator(self, fixture):
        sel = select_transitions(fixture.group, 1.0, None)
        assert sel[0] == [6, 5, 4, 3, 2]

    def test_invalid_fraction(self, fixture):
        with pytest.raises(ValueError, match="timestep fraction"):
            select_transitions(fixture.group, 0.0, None)

    def test_window_violation(self, fixture):
        group = RolloutGroup(Granularity.COARSE, fixture.group.cond, fixture.group.trajectories, window=(3, 6))
        with pytest.raises(WindowViolationError, match="outside window"):
            gather_transitions(group, {0: [2]})

    def test_missing_transition(self, fixture):
        partial = fixture.group.trajectories[0].copy()
        partial.stop = 3
        group = RolloutGroup(Granularity.COARSE, 0, [partial], window=(0, 6))
        with pytest.raises(MissingTransitionError, match="missing transition at step 2"):
            gather_transitions(group, {0: [2]})


class TestPolicyLosses:
    def test_grpo_on_policy_is_zero(self, fixture):
        loss = grpo_loss(fixture.model, fixture.model.frozen_copy(), [fixture.group], ClipConfig())
        assert float(loss) == pytest.approx(0.0, abs=1e-12)

    def test_grpo_flat_region_has_zero_gradient(self, fixture):
        line, counts = clipped_region_check(fixture, ClipConfig())
        assert line.passed
        assert sum(counts.values()) > 0

    def test_ddpo_on_policy_is_negative_mean_reward(self, fixture):
        loss = ddpo_loss(fixture.model, fixture.model.frozen_copy(), [fixture.group])
        assert float(loss) == pytest.approx(-float(np.mean(fixture.group.rewards)))

    def test_ddpo_needs_rewards(self, fixture):
        group = RolloutGroup(Granularity.COARSE, 0, fixture.group.trajectories)
        with pytest.raises(ValueError, match="needs rewards"):
            ddpo_loss(fixture.model, fixture.old_model, [group])

    def test_empty_groups_give_constant_zero(self, fixture):
        empty = RolloutGroup(Granularity.COARSE, 0, [])
        loss = grpo_loss(fixture.model, fixture.old_model, [empty], ClipConfig())
        assert float(loss) == 0.0 and not loss.requires_grad

    def test_policy_gradient_identities(self, fixture):
        report = verify_corollaries(fixture)
        assert report.passed, report.to_text()


class TestImitationForm:
    def test_reward_weighted_matches_ddpo(self, fixture):
        selection = [select_transitions(fixture.group, 1.0, None)]
        ddpo = -flat_grad(ddpo_loss(fixture.model, fixture.old_model, [fixture.group], selections=selection),
                          fixture.model)
        imitation = imitation_form_gradient(fixture.model, [fixture.group], selection,
                                            old_model=fixture.old_model, weights="reward")
        assert relative_l2(ddpo, imitation) < 1e-8

    def test_empty_groups_give_zero_gradient(self, fixture):
        empty = RolloutGroup(Granularity.COARSE, 0, [])
        grad = imitation_form_gradient(fixture.model, [empty], [{}])
        assert np.array_equal(grad, np.zeros(fixture.model.num_params))

    def test_unknown_weight_kind(self, fixture):
        selection = [select_transitions(fixture.group, 1.0, None)]
        with pytest.raises(ValueError, match="unknown weight kind"):
            imitation_form_gradient(fixture.model, [fixture.group], selection, weights="rank")


class TestDpo:
    def test_loss_against_itself_is_log_two(self, fixture):
        pair = preference_pairs(fixture.group)[0]
        loss = dpo_loss(fixture.model, fixture.model.frozen_copy(), pair)
        assert float(loss) == pytest.approx(math.log(2.0))

    def test_degenerate_pair(self, fixture):
        traj = fixture.group.trajectories[0]
        with pytest.raises(DegeneratePairError, match="degenerate pair"):
            dpo_loss(fixture.model, fixture.old_model, (traj, traj))

    def test_preference_pairs_best_with_worst(self, fixture):
        trajs = fixture.group.trajectories[:4]
        group = RolloutGroup(Granularity.COARSE, 0, trajs, rewards=np.array([3.0, 1.0, 2.0, 0.0]))
        pairs = preference_pairs(group)
        assert pairs[0][0] is trajs[0] and pairs[0][1] is trajs[3]
        assert pairs[1][0] is trajs[2] and pairs[1][1] is trajs[1]
        assert len(pairs) == 2

    def test_equal_reward_pairs_skipped(self, fixture):
        trajs = fixture.group.trajectories[:2]
        group = RolloutGroup(Granularity.COARSE, 0, trajs, rewards=np.array([1.0, 1.0]))
        assert preference_pairs(group) == []

    def test_group_loss_is_mean_over_pairs(self, fixture):
        ref = fixture.model.frozen_copy()
        loss = dpo_group_loss(fixture.model, ref, [fixture.group], beta=1.0, timestep_fraction=1.0, rng=None)
        assert float(loss) == pytest.approx(math.log(2.0))
