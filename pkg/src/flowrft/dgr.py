"""
Dynamic granularity rollout.

Inter-group: a periodic schedule decides whether an iteration's groups
share one initial noise (fine) or draw independent ones (coarse).

Intra-group: every member is sampled only down to the perception knot t_s,
its clean sample is estimated in one Euler step, k-means picks K1
representatives (𝒢₁) that are sampled to completion, and the remaining
members (𝒢₂) are scored on their estimates. The two groups are normalized
and optimized separately.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch

from .clustering import KMeansResult, kmeans
from .constants import DEFAULT_KMEANS_ITERS, SCHEDULE_MODES
from .groups import Granularity, RolloutGroup, Selection, WindowViolationError
from .model import VelocityModel
from .objectives import ClipConfig, grpo_loss
from .sde import NoiseSchedule, advance
from .seeding import KeyedRNG
from .trajectory import Trajectory

logger = logging.getLogger(__name__)

FeatureMap = Callable[[np.ndarray], np.ndarray]


class MissingVelocityError(ValueError):
    """Raised when perception finds no cached velocity at the stop knot."""
    pass


@dataclass(frozen=True)
class GranularitySchedule:
    """
    j_g fine iterations followed by j_c coarse ones, repeating with period j.

    ``mode`` "fine" or "coarse" pins every iteration to one granularity.
    """
    period: int = 40
    fine_steps: int = 30
    coarse_steps: int = 10
    mode: str = "dynamic"

    def __post_init__(self):
        if self.mode not in SCHEDULE_MODES:
            raise ValueError(f"Unknown schedule mode '{self.mode}'. Available: {', '.join(SCHEDULE_MODES)}")
        if self.fine_steps + self.coarse_steps != self.period:
            raise ValueError("fine_steps + coarse_steps must equal the period")
        if self.mode == "dynamic" and (self.fine_steps < 1 or self.coarse_steps < 1):
            raise ValueError(
                f"dynamic schedule needs at least one fine and one coarse step, got "
                f"j_g={self.fine_steps}, j_c={self.coarse_steps}"
            )

    @classmethod
    def from_ratio(cls, period: int, coarse_ratio: float, mode: str = "dynamic") -> "GranularitySchedule":
        coarse = int(round(period * coarse_ratio))
        return cls(period=period, fine_steps=period - coarse, coarse_steps=coarse, mode=mode)

    @property
    def coarse_ratio(self) -> float:
        return self.coarse_steps / self.period


def schedule_granularity(iteration: int, sched: GranularitySchedule) -> Granularity:
    """
    Granularity of an iteration.

    Examples:
        >>> s = GranularitySchedule.from_ratio(40, 0.25)
        >>> [schedule_granularity(i, s).value for i in (0, 30, 40)]
        ['fine', 'coarse', 'fine']
    """
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    if sched.mode == "fine":
        return Granularity.FINE
    if sched.mode == "coarse":
        return Granularity.COARSE
    return Granularity.FINE if iteration % sched.period < sched.fine_steps else Granularity.COARSE


def init_group_noises(granularity: Granularity, K: int, d: int, rng: KeyedRNG) -> List[np.ndarray]:
    """
    Initial states for one group.

    Coarse members draw from keys (k,); a fine group draws once from key (0,)
    and replicates the vector.
    """
    if K < 2:
        raise ValueError(f"group needs K >= 2, got {K}")
    if granularity == Granularity.FINE:
        shared = rng.generator(0).standard_normal(d)
        return [shared.copy() for _ in range(K)]
    return [rng.generator(k).standard_normal(d) for k in range(K)]


def cache_velocities(model: VelocityModel, trajectories: Sequence[Trajectory]) -> None:
    """Evaluate and store v_θ at each trajectory's current stop knot."""
    for traj in trajectories:
        s = traj.stop
        if s == 0 or not np.isnan(traj.velocities[s]).any():
            continue
        traj.velocities[s] = model.velocity(traj.states[s], traj.grid.t(s), traj.cond)


def coarse_progress_perception(model: VelocityModel, trajectories: Sequence[Trajectory]) -> List[np.ndarray]:
    """
    Single-step clean estimates x̂0 = x − t·v at each trajectory's stop knot.

    The estimate is cached on the trajectory. ``model`` is the policy whose
    velocity was cached; it is not re-evaluated.

    Raises:
        MissingVelocityError: if a stop knot above 0 has no cached velocity
    """
    out = []
    for k, traj in enumerate(trajectories):
        s = traj.stop
        x = traj.states[s]
        if s == 0:
            pred = x.copy()
        else:
            v = traj.velocities[s]
            if np.isnan(v).any():
                raise MissingVelocityError(f"trajectory {k} has no cached velocity at knot {s}")
            pred = x - traj.grid.t(s) * v
        traj.coarse_pred = pred
        traj.coarse_knot = s
        out.append(pred)
    return out


@dataclass
class SelectionResult:
    centers: np.ndarray
    g1_indices: List[int]
    g2_indices: List[int]
    feature_tag: str = "perception"
    inertia: float = 0.0


def select_representatives(
    perceptions: Sequence[np.ndarray],
    K1: int,
    rng: np.random.Generator,
    feature_map: Optional[FeatureMap] = None,
    feature_tag: str = "perception",
    max_iters: int = DEFAULT_KMEANS_ITERS,
) -> SelectionResult:
    """
    Cluster features into K1 groups and keep the member nearest each center.

    Centers are visited in order; each claims its nearest unclaimed member,
    ties going to the lowest index.
    """
    if any(p is None for p in perceptions):
        raise MissingVelocityError("perceptions must be computed before selection")
    feats = np.asarray([feature_map(p) if feature_map else p for p in perceptions], dtype=np.float64)
    K = len(feats)
    if K1 == K:
        return SelectionResult(centers=feats.copy(), g1_indices=list(range(K)), g2_indices=[],
                               feature_tag=feature_tag, inertia=0.0)
    result: KMeansResult = kmeans(feats, K1, rng, max_iters=max_iters)
    claimed: List[int] = []
    for center in result.centers:
        dist = ((feats - center) ** 2).sum(axis=1)
        for idx in sorted(range(K), key=lambda i: (dist[i], i)):
            if idx not in claimed:
                claimed.append(idx)
                break
    g2 = [i for i in range(K) if i not in claimed]
    return SelectionResult(centers=result.centers, g1_indices=claimed, g2_indices=g2,
                           feature_tag=feature_tag, inertia=result.inertia)


def refine_fine_grained(
    model: VelocityModel,
    trajectories: Sequence[Trajectory],
    indices: Sequence[int],
    sched: NoiseSchedule,
    rng: KeyedRNG,
) -> List[Trajectory]:
    """
    Continue 𝒢₁ members from their stop knot to t = 0.

    ``indices`` are the members' positions in the original group, so their
    noise keys continue the same streams the window rollout used.
    """
    for traj, k in zip(trajectories, indices):
        advance(model, traj, sched, rng, k, 0)
    return list(trajectories)


def count_step_units(trajectories: Sequence[Trajectory]) -> int:
    """Number of sampler steps taken across the given trajectories."""
    return sum(len(t.transitions()) for t in trajectories)


def dual_group_loss(
    model: VelocityModel,
    old_model: VelocityModel,
    g1: RolloutGroup,
    g2: Optional[RolloutGroup],
    clip: ClipConfig,
    fraction: float = 1.0,
    rng: Optional[np.random.Generator] = None,
    selections: Optional[Sequence[Selection]] = None,
) -> torch.Tensor:
    """
    GRPO loss of 𝒢₁ plus GRPO loss of 𝒢₂, each averaged on its own.

    Raises:
        WindowViolationError: if a 𝒢₂ member was sampled past its window
    """
    sel1, sel2 = (None, None) if selections is None else selections
    loss = grpo_loss(model, old_model, [g1], clip, fraction, rng, None if sel1 is None else [sel1])
    if g2 is None or g2.is_empty:
        return loss
    lo, _ = g2.window
    for k, traj in enumerate(g2.trajectories):
        if traj.stop < lo:
            raise WindowViolationError(f"member {k} of 𝒢₂ sampled to knot {traj.stop}, below window {g2.window}")
    return loss + grpo_loss(model, old_model, [g2], clip, fraction, rng, None if sel2 is None else [sel2])
