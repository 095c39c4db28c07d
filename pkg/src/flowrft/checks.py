"""
Gradient checks and policy-gradient identities.

Each check builds a small fixture (a sub-1k-parameter model, a perturbed
old policy and a group of trajectories sampled from it) and compares two
independently computed quantities. Results are ReportLines so the verify
command can aggregate them.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch

from .constants import IDENTITY_RTOL, FD_RTOL, FD_STEP
from .cpgo import CpgoConfig, cpgo_loss
from .data import MixtureSpec, sample_mixture
from .dgr import init_group_noises
from .flow import PretrainBatch, fm_loss
from .groups import Granularity, RolloutGroup, TransitionBatch, gather_transitions, select_transitions
from .model import ModelArch, VelocityModel, flat_grad
from .objectives import (
    AdvantageSet,
    ClipConfig,
    _log_ratio,
    classify_region,
    ddpo_loss,
    dpo_imitation_gradient,
    dpo_loss,
    grpo_loss,
    group_advantages,
    imitation_form_gradient,
    preference_pairs,
)
from .records import ReportLine, VerificationReport
from .rewards import RewardSpec, create_reward
from .sde import NoiseSchedule, rollout
from .seeding import KeyedRNG, Stream, keyed_rng
from .trajectory import TimeGrid

logger = logging.getLogger(__name__)

CHECK_ARCH = ModelArch(data_dim=2, hidden_widths=(16, 16), activation="tanh",
                       time_embed_dim=4, cond_dim=4, n_conditions=4)
# Clip range wide enough that no ratio reaches the window edge.
WIDE_CLIP = ClipConfig(epsilon=10.0, adv_clip=5.0)
TINY = 1e-300


def relative_l2(a: np.ndarray, b: np.ndarray) -> float:
    """‖a − b‖ / max(‖a‖, ‖b‖); 0 when both vanish."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b), TINY)
    return float(np.linalg.norm(a - b) / denom)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """
    Largest per-parameter |a − n| / max(|a|, |n|, f).

    f is ``floor`` times the largest analytic component (at least ``floor``),
    so parameters with vanishing gradient are judged on an absolute scale.
    """
    scale = floor * max(1.0, float(np.max(np.abs(analytic), initial=0.0)))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), scale)
    return float(np.max(np.abs(analytic - numeric) / denom, initial=0.0))


def finite_difference_gradient(
    loss_fn: Callable[[], torch.Tensor],
    model: VelocityModel,
    step: float = FD_STEP,
) -> np.ndarray:
    """Central differences of ``loss_fn`` w.r.t. every parameter of ``model``."""
    base = model.flat_params()
    grad = np.zeros_like(base)
    try:
        for i in range(base.size):
            probe = base.copy()
            probe[i] = base[i] + step
            model.set_flat_params(probe)
            with torch.no_grad():
                up = float(loss_fn())
            probe[i] = base[i] - step
            model.set_flat_params(probe)
            with torch.no_grad():
                down = float(loss_fn())
            grad[i] = (up - down) / (2.0 * step)
    finally:
        model.set_flat_params(base)
    return grad


def gradient_check(
    name: str,
    loss_fn: Callable[[], torch.Tensor],
    model: VelocityModel,
    step: float = FD_STEP,
    rtol: float = FD_RTOL,
) -> ReportLine:
    analytic = flat_grad(loss_fn(), model)
    numeric = finite_difference_gradient(loss_fn, model, step)
    err = max_relative_error(analytic, numeric)
    return ReportLine(name=f"grad_{name}", value=err, tolerance=rtol, passed=err < rtol)


@dataclass
class CheckFixture:
    """Current model, perturbed old policy and one scored group sampled from it."""
    model: VelocityModel
    old_model: VelocityModel
    group: RolloutGroup
    sched: NoiseSchedule
    grid: TimeGrid


def build_fixture(
    seed: int,
    arch: ModelArch = CHECK_ARCH,
    K: int = 6,
    T: int = 6,
    eta: float = 0.7,
    perturbation: float = 1e-2,
    cond: int = 1,
) -> CheckFixture:
    """
    Sample a coarse group from θ_old = θ + perturbation·N(0, I) and score it.

    The trajectories are complete and every transition except the last is
    stochastic.
    """
    model = VelocityModel.from_arch(arch, seed)
    old_model = model.frozen_copy()
    noise = keyed_rng(seed, Stream.PROBE, 0).standard_normal(model.num_params)
    old_model.set_flat_params(model.flat_params() + perturbation * noise)

    grid = TimeGrid.build(T, 1.0)
    sched = NoiseSchedule(eta=eta)
    init = init_group_noises(Granularity.COARSE, K, arch.data_dim, KeyedRNG(seed, Stream.INIT_NOISE, (0,)))
    trajs = rollout(old_model, init, grid, cond, sched, KeyedRNG(seed, Stream.SDE, (0,)))
    reward = create_reward(RewardSpec(kind="target_distance", n_modes=arch.n_conditions))
    rewards = reward.evaluate_many([t.endpoint for t in trajs], cond)
    group = RolloutGroup(Granularity.COARSE, cond, trajs, rewards=rewards,
                         advantages=group_advantages(rewards))
    return CheckFixture(model=model, old_model=old_model, group=group, sched=sched, grid=grid)


def run_gradient_checks(seed: int = 0, step: float = FD_STEP, rtol: float = FD_RTOL) -> VerificationReport:
    """Analytic vs central-difference gradients for every differentiable loss."""
    fx = build_fixture(seed)
    model, old_model, group = fx.model, fx.old_model, fx.group
    report = VerificationReport()
    selection = [select_transitions(group, 1.0, None)]

    data = sample_mixture(MixtureSpec(n_modes=CHECK_ARCH.n_conditions), 64, keyed_rng(seed, Stream.DATA, 0))
    batch = PretrainBatch.draw(data, 32, keyed_rng(seed, Stream.PRETRAIN, 0))
    report.add(gradient_check("fm_loss", lambda: fm_loss(model, batch), model, step, rtol))

    report.add(gradient_check(
        "grpo_loss",
        lambda: grpo_loss(model, old_model, [group], WIDE_CLIP, selections=selection),
        model, step, rtol,
    ))
    report.add(gradient_check(
        "ddpo_loss",
        lambda: ddpo_loss(model, old_model, [group], selections=selection),
        model, step, rtol,
    ))
    pair = preference_pairs(group)[0]
    steps = sorted(pair[0].stochastic_transitions(), reverse=True)
    report.add(gradient_check(
        "dpo_loss",
        lambda: dpo_loss(model, old_model, pair, beta=1.0, steps=steps),
        model, step, rtol,
    ))
    cfg = CpgoConfig(omega=1.0, tau=1.0)
    report.add(gradient_check(
        "cpgo_loss",
        lambda: cpgo_loss(model, old_model, group.trajectories, cfg).loss,
        model, step, rtol,
    ))
    return report


def _row_ratios(fx: CheckFixture) -> Tuple[Dict[int, List[int]], TransitionBatch, np.ndarray]:
    selection = select_transitions(fx.group, 1.0, None)
    batch = gather_transitions(fx.group, selection)
    with torch.no_grad():
        log_ratio, _ = _log_ratio(fx.model, fx.old_model, batch)
    return selection, batch, torch.exp(log_ratio).numpy()


def clipped_region_check(fx: CheckFixture, clip: ClipConfig) -> Tuple[ReportLine, Dict[str, int]]:
    """
    Gradient of the clipped objective when every row sits in a flat region.

    One transition per member is kept, chosen with |ρ − 1| > 2ε, and the
    member's advantage is set to +1 when ρ > 1 and −1 when ρ < 1.
    """
    _, batch, ratio = _row_ratios(fx)
    chosen: Dict[int, List[int]] = {}
    adv = np.zeros(len(fx.group))
    counts = {"u1_v1": 0, "u2_not_v1": 0}
    for row, (k, n) in enumerate(zip(batch.traj_index, batch.step)):
        if int(k) in chosen or abs(ratio[row] - 1.0) <= 2.0 * clip.epsilon:
            continue
        a = 1.0 if ratio[row] > 1.0 else -1.0
        flags, zero = classify_region(float(ratio[row]), a, clip)
        if not zero:
            continue
        chosen[int(k)] = [int(n)]
        adv[int(k)] = a
        counts["u1_v1" if flags.u1 else "u2_not_v1"] += 1

    group = RolloutGroup(fx.group.granularity, fx.group.cond, fx.group.trajectories,
                         rewards=fx.group.rewards, window=fx.group.window)
    group.advantages = AdvantageSet(rewards=np.asarray(group.rewards), mean=0.0, std=1.0, advantages=adv)
    if not chosen:
        return ReportLine("grpo_clipped_zero_grad", float("inf"), 0.0, False, note="no clipped rows"), counts
    loss = grpo_loss(fx.model, fx.old_model, [group], clip, selections=[chosen])
    grad = flat_grad(loss, fx.model)
    value = float(np.max(np.abs(grad)))
    note = f"u1&v1={counts['u1_v1']} u2&!v1={counts['u2_not_v1']}"
    return ReportLine("grpo_clipped_zero_grad", value, 0.0, value == 0.0, note=note), counts


def verify_corollaries(
    fx: CheckFixture,
    rtol: float = IDENTITY_RTOL,
    clip: Optional[ClipConfig] = None,
    beta: float = 1.0,
) -> VerificationReport:
    """
    Policy gradients against their trajectory-imitation forms.

    - GRPO inside the clip window: −∇loss equals the ρ-weighted
      advantage imitation gradient.
    - GRPO in the two flat regions: the gradient is exactly zero.
    - DDPO: −∇loss equals the ρ-weighted raw-reward imitation gradient.
    - DPO: −∇loss equals the (1 − σ(m))-weighted difference of imitation
      gradients with ω = β/(2ε²Δt).
    """
    report = VerificationReport()
    model, old_model, group = fx.model, fx.old_model, fx.group
    selection = [select_transitions(group, 1.0, None)]

    grpo = -flat_grad(grpo_loss(model, old_model, [group], WIDE_CLIP, selections=selection), model)
    imitation = imitation_form_gradient(model, [group], selection, old_model=old_model)
    err = relative_l2(grpo, imitation)
    report.add(ReportLine("grpo_unclipped_identity", err, rtol, err < rtol))

    line, _ = clipped_region_check(fx, clip or ClipConfig())
    report.add(line)

    ddpo = -flat_grad(ddpo_loss(model, old_model, [group], selections=selection), model)
    imitation = imitation_form_gradient(model, [group], selection, old_model=old_model, weights="reward")
    err = relative_l2(ddpo, imitation)
    report.add(ReportLine("ddpo_reward_weighted_identity", err, rtol, err < rtol))

    errs = []
    for pair in preference_pairs(group):
        steps = sorted(pair[0].stochastic_transitions(), reverse=True)
        dpo = -flat_grad(dpo_loss(model, old_model, pair, beta=beta, steps=steps), model)
        errs.append(relative_l2(dpo, dpo_imitation_gradient(model, old_model, pair, beta, steps)))
    err = max(errs, default=float("inf"))
    report.add(ReportLine("dpo_sigmoid_weight_identity", err, rtol, err < rtol, note=f"pairs={len(errs)}"))
    return report


def on_policy_check(fx: CheckFixture, tol: float = 1e-12) -> ReportLine:
    """With θ = θ_old every ratio is 1 and the GRPO loss is −mean(A) = 0."""
    loss = float(grpo_loss(fx.model, fx.model.frozen_copy(), [fx.group], ClipConfig()).detach())
    return ReportLine("grpo_on_policy_zero", abs(loss), tol, abs(loss) <= tol)

