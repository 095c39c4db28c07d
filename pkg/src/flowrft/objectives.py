"""
Policy objectives over recorded trajectories: GRPO, DDPO and online DPO.

Every loss is a quantity to minimize (a negated objective) returned as a
scalar torch tensor attached to the current model's graph; use
``model.flat_grad`` for the parameter gradient. Old and reference models
are evaluated under ``torch.no_grad``.

The imitation-form gradients return the ascent direction of the matching
objective (that is, −∇loss) written as a weighted regression of the
predicted transition mean onto the sampled next state.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .constants import ADVANTAGE_GUARD, DEFAULT_ADV_CLIP_MAX, DEFAULT_CLIP_RANGE
from .groups import (
    RolloutGroup,
    Selection,
    TransitionBatch,
    gather_transitions,
    policy_means,
    select_transitions,
)
from .model import DTYPE, VelocityModel, flat_grad
from .sde import gaussian_log_density
from .trajectory import Trajectory

logger = logging.getLogger(__name__)


class GroupTooSmallError(ValueError):
    """Raised when a group has fewer than two rewards."""
    pass


class DegeneratePairError(ValueError):
    """Raised when a preference pair compares a trajectory with itself."""
    pass


@dataclass
class AdvantageSet:
    """Group-normalized rewards A[k] = (r[k] − mean)/(std + guard), clamped."""
    rewards: np.ndarray
    mean: float
    std: float
    advantages: np.ndarray
    eps_guard: float = ADVANTAGE_GUARD


@dataclass(frozen=True)
class ClipConfig:
    epsilon: float = DEFAULT_CLIP_RANGE
    adv_clip: float = DEFAULT_ADV_CLIP_MAX

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"clip range must be positive, got {self.epsilon}")
        if not self.adv_clip > 0:
            raise ValueError(f"advantage cap must be positive, got {self.adv_clip}")


@dataclass(frozen=True)
class RegionFlags:
    u1: bool
    u2: bool
    v1: bool


def group_advantages(
    rewards: Sequence[float],
    guard: float = ADVANTAGE_GUARD,
    adv_clip: Optional[float] = DEFAULT_ADV_CLIP_MAX,
) -> AdvantageSet:
    """
    Normalize rewards with the population mean and standard deviation.

    Examples:
        >>> group_advantages([0.0, 2.0]).advantages.round(6).tolist()
        [-1.0, 1.0]

    Raises:
        GroupTooSmallError: if fewer than two rewards are given
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise GroupTooSmallError("group too small")
    mean = float(r.mean())
    std = float(r.std())
    adv = (r - mean) / (std + guard)
    if np.all(r == r[0]):
        adv = np.zeros_like(r)
    if adv_clip is not None:
        adv = np.clip(adv, -adv_clip, adv_clip)
    return AdvantageSet(rewards=r, mean=mean, std=std, advantages=adv, eps_guard=guard)


def grpo_surrogate(ratio, advantage, clip: ClipConfig):
    """min(ρ·A, clip(ρ, 1−ε, 1+ε)·A); floats or tensors."""
    if isinstance(ratio, torch.Tensor):
        clipped = torch.clamp(ratio, 1.0 - clip.epsilon, 1.0 + clip.epsilon)
        return torch.minimum(ratio * advantage, clipped * advantage)
    clipped = min(max(ratio, 1.0 - clip.epsilon), 1.0 + clip.epsilon)
    return min(ratio * advantage, clipped * advantage)


def classify_region(ratio: float, advantage: float, clip: ClipConfig) -> Tuple[RegionFlags, bool]:
    """
    Which side of the clip window ρ falls on, and whether the surrogate is flat.

    Examples:
        >>> classify_region(0.9, -1.0, ClipConfig(epsilon=0.05))[1]
        True
    """
    u1 = ratio <= 1.0 - clip.epsilon
    u2 = ratio >= 1.0 + clip.epsilon
    v1 = advantage < 0
    zero_grad = (u1 and v1) or (u2 and not v1)
    return RegionFlags(u1=u1, u2=u2, v1=v1), zero_grad


def _resolve_selections(
    groups: Sequence[RolloutGroup],
    fraction: float,
    rng: Optional[np.random.Generator],
    selections: Optional[Sequence[Selection]],
) -> List[Selection]:
    if selections is not None:
        if len(selections) != len(groups):
            raise ValueError(f"{len(selections)} selections for {len(groups)} groups")
        return list(selections)
    return [select_transitions(g, fraction, rng) for g in groups]


def _log_ratio(model: VelocityModel, old_model: VelocityModel, batch: TransitionBatch) -> Tuple[torch.Tensor, torch.Tensor]:
    """(log ρ per row, μ_θ per row)."""
    mean = policy_means(model, batch)
    with torch.no_grad():
        old_mean = policy_means(old_model, batch)
    var = batch.variance
    logp = gaussian_log_density(mean, batch.observed, var)
    old_logp = gaussian_log_density(old_mean, batch.observed, var)
    return logp - old_logp, mean


def _zero(model: VelocityModel) -> torch.Tensor:
    return torch.zeros((), dtype=DTYPE)


def grpo_loss(
    model: VelocityModel,
    old_model: VelocityModel,
    groups: Sequence[RolloutGroup],
    clip: ClipConfig,
    timestep_fraction: float = 1.0,
    rng: Optional[np.random.Generator] = None,
    selections: Optional[Sequence[Selection]] = None,
) -> torch.Tensor:
    """
    Negative mean clipped surrogate over sampled (member, step) pairs.

    Groups must carry advantages. Rows from all groups are pooled before
    the mean. With no usable transition the loss is a constant zero.
    """
    selections = _resolve_selections(groups, timestep_fraction, rng, selections)
    terms = []
    for group, selection in zip(groups, selections):
        if group.is_empty or not selection:
            continue
        batch = gather_transitions(group, selection)
        log_ratio, _ = _log_ratio(model, old_model, batch)
        ratio = torch.exp(log_ratio)
        adv = torch.as_tensor(group.advantage_array()[batch.traj_index], dtype=DTYPE)
        adv = torch.clamp(adv, -clip.adv_clip, clip.adv_clip)
        terms.append(grpo_surrogate(ratio, adv, clip))
    if not terms:
        return _zero(model)
    return -torch.cat(terms).mean()


def imitation_form_gradient(
    model: VelocityModel,
    groups: Sequence[RolloutGroup],
    selections: Sequence[Selection],
    old_model: Optional[VelocityModel] = None,
    weights: str = "advantage",
    omega_scale: float = 1.0,
) -> np.ndarray:
    """
    Gradient of −mean[ ω(t)·w·‖μ_θ(x_t, t) − x_{t−1}‖² ], ω(t) = scale/(2ε²Δt).

    Args:
        weights: "advantage" uses the group advantage A, "reward" the raw reward
        old_model: When given, each row is also weighted by the detached ratio
            ρ = p_θ/p_θ_old, which makes the identity with the clipped
            objective exact inside the clip window
        omega_scale: Multiplies ω (β for the DPO form)
    """
    terms = []
    for group, selection in zip(groups, selections):
        if group.is_empty or not selection:
            continue
        batch = gather_transitions(group, selection)
        mean = policy_means(model, batch)
        if weights == "advantage":
            w = group.advantage_array()
        elif weights == "reward":
            w = np.asarray(group.rewards, dtype=np.float64)
        else:
            raise ValueError(f"unknown weight kind '{weights}'")
        w = torch.as_tensor(w[batch.traj_index], dtype=DTYPE)
        if old_model is not None:
            with torch.no_grad():
                log_ratio, _ = _log_ratio(model, old_model, batch)
            w = w * torch.exp(log_ratio)
        omega = omega_scale / (2.0 * batch.variance)
        sq = ((mean - batch.observed) ** 2).sum(dim=-1)
        terms.append(omega * w * sq)
    if not terms:
        return np.zeros(model.num_params)
    objective = -torch.cat(terms).mean()
    return flat_grad(objective, model)


def ddpo_loss(
    model: VelocityModel,
    old_model: VelocityModel,
    groups: Sequence[RolloutGroup],
    timestep_fraction: float = 1.0,
    rng: Optional[np.random.Generator] = None,
    selections: Optional[Sequence[Selection]] = None,
    group_based: bool = True,
) -> torch.Tensor:
    """
    Importance-weighted reward objective −mean(ρ·r).

    With ``group_based`` each group is averaged first and groups are then
    averaged; otherwise all rows are pooled.
    """
    selections = _resolve_selections(groups, timestep_fraction, rng, selections)
    per_group = []
    for group, selection in zip(groups, selections):
        if group.is_empty or not selection:
            continue
        if group.rewards is None:
            raise ValueError("ddpo needs rewards attached to the group")
        batch = gather_transitions(group, selection)
        log_ratio, _ = _log_ratio(model, old_model, batch)
        r = torch.as_tensor(np.asarray(group.rewards, dtype=np.float64)[batch.traj_index], dtype=DTYPE)
        per_group.append(torch.exp(log_ratio) * r)
    if not per_group:
        return _zero(model)
    if group_based:
        return -torch.stack([g.mean() for g in per_group]).mean()
    return -torch.cat(per_group).mean()


def _pair_steps(
    winner: Trajectory,
    loser: Trajectory,
    fraction: float,
    rng: Optional[np.random.Generator],
) -> List[int]:
    common = [
        n for n in winner.stochastic_transitions()
        if loser.has_transition(n) and loser.variance(n) > 0.0
    ]
    if not common:
        return []
    if fraction >= 1.0:
        return common
    if rng is None:
        raise ValueError("a generator is required when timestep fraction < 1")
    m = max(1, int(fraction * len(common)))
    chosen = rng.permutation(len(common))[:m]
    return sorted((common[i] for i in chosen), reverse=True)


def _pair_batches(winner: Trajectory, loser: Trajectory, steps: List[int]) -> Tuple[TransitionBatch, TransitionBatch]:
    def batch_of(traj):
        grid = traj.grid
        group = RolloutGroup(granularity=None, cond=traj.cond, trajectories=[traj], window=(traj.stop, grid.T))
        return gather_transitions(group, {0: steps})

    return batch_of(winner), batch_of(loser)


def _check_pair(pair: Tuple[Trajectory, Trajectory]) -> Tuple[Trajectory, Trajectory]:
    winner, loser = pair
    if winner is loser or np.array_equal(winner.states, loser.states, equal_nan=True):
        raise DegeneratePairError("degenerate pair")
    return winner, loser


def dpo_margins(
    model: VelocityModel,
    ref_model: VelocityModel,
    pair: Tuple[Trajectory, Trajectory],
    beta: float,
    steps: List[int],
) -> torch.Tensor:
    """Per-step margins m_t = β·(log-ratio of winner − log-ratio of loser)."""
    winner, loser = _check_pair(pair)
    bw, bl = _pair_batches(winner, loser, steps)
    log_ratio_w, _ = _log_ratio(model, ref_model, bw)
    log_ratio_l, _ = _log_ratio(model, ref_model, bl)
    return beta * log_ratio_w - beta * log_ratio_l


def dpo_loss(
    model: VelocityModel,
    ref_model: VelocityModel,
    pair: Tuple[Trajectory, Trajectory],
    beta: float = 1.0,
    timestep_fraction: float = 1.0,
    rng: Optional[np.random.Generator] = None,
    steps: Optional[List[int]] = None,
) -> torch.Tensor:
    """
    −mean_t log σ(m_t) over steps shared by both trajectories.

    Raises:
        DegeneratePairError: if winner and loser are the same trajectory
    """
    winner, loser = _check_pair(pair)
    if steps is None:
        steps = _pair_steps(winner, loser, timestep_fraction, rng)
    if not steps:
        return _zero(model)
    margins = dpo_margins(model, ref_model, pair, beta, steps)
    return -F.logsigmoid(margins).mean()


def dpo_imitation_gradient(
    model: VelocityModel,
    ref_model: VelocityModel,
    pair: Tuple[Trajectory, Trajectory],
    beta: float,
    steps: List[int],
) -> np.ndarray:
    """
    mean_t (1−σ(m_t))·[∇(−ω‖μ_θ^w − x^w‖²) − ∇(−ω‖μ_θ^l − x^l‖²)], ω = β/(2ε²Δt).

    The sigmoid weights are detached.
    """
    winner, loser = _check_pair(pair)
    with torch.no_grad():
        weight = 1.0 - torch.sigmoid(dpo_margins(model, ref_model, pair, beta, steps))
    bw, bl = _pair_batches(winner, loser, steps)
    mean_w = policy_means(model, bw)
    mean_l = policy_means(model, bl)
    omega = beta / (2.0 * bw.variance)
    sq_w = ((mean_w - bw.observed) ** 2).sum(dim=-1)
    sq_l = ((mean_l - bl.observed) ** 2).sum(dim=-1)
    objective = (weight * (-omega * sq_w + omega * sq_l)).mean()
    return flat_grad(objective, model)


def preference_pairs(group: RolloutGroup) -> List[Tuple[Trajectory, Trajectory]]:
    """
    Pair the i-th best member with the i-th worst; equal-reward pairs are skipped.

    Ties in reward are broken by the lower member index ranking first.
    """
    if group.rewards is None:
        raise ValueError("preference pairs need rewards")
    r = np.asarray(group.rewards, dtype=np.float64)
    order = sorted(range(len(r)), key=lambda k: (-r[k], k))
    pairs = []
    for i in range(len(order) // 2):
        w, l = order[i], order[len(order) - 1 - i]
        if r[w] > r[l]:
            pairs.append((group.trajectories[w], group.trajectories[l]))
    return pairs


def dpo_group_loss(
    model: VelocityModel,
    ref_model: VelocityModel,
    groups: Sequence[RolloutGroup],
    beta: float,
    timestep_fraction: float,
    rng: Optional[np.random.Generator],
) -> torch.Tensor:
    """Mean DPO loss over every preference pair formed inside each group."""
    losses = []
    for group in groups:
        if group.is_empty:
            continue
        for pair in preference_pairs(group):
            losses.append(dpo_loss(model, ref_model, pair, beta, timestep_fraction, rng))
    if not losses:
        return _zero(model)
    return torch.stack(losses).mean()
