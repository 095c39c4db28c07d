"""
Rollout groups and batched access to their recorded transitions.

A group is K trajectories for one condition, sampled over a window of
knots (lo, hi]. Losses never touch transitions outside the window.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Dict, List, Optional, Tuple

import numpy as np
import torch

from .model import DTYPE, VelocityModel
from .sde import _score
from .trajectory import Trajectory

if TYPE_CHECKING:
    from .objectives import AdvantageSet

logger = logging.getLogger(__name__)

# Map trajectory index -> transition indices chosen for the loss.
Selection = Dict[int, List[int]]


class Granularity(Enum):
    FINE = "fine"
    COARSE = "coarse"


class MissingTransitionError(KeyError):
    """Raised when a loss asks for a transition the trajectory never recorded."""

    def __init__(self, traj_index: int, step: int):
        super().__init__(f"missing transition at step {step} of trajectory {traj_index}")
        self.traj_index = traj_index
        self.step = step

    def __str__(self) -> str:
        return self.args[0]


class WindowViolationError(ValueError):
    """Raised when a selected transition lies outside the group's window."""
    pass


@dataclass
class RolloutGroup:
    """
    K trajectories for one condition.

    Attributes:
        granularity: FINE (shared initial noise) or COARSE (independent noises)
        cond: Condition index
        trajectories: Members
        rewards: One reward per member, or None before scoring
        advantages: Normalized advantages, or None before normalization
        window: (lo, hi) knots; transitions lo+1..hi are usable
        reward_source: "endpoint" or "perception"
    """
    granularity: Granularity
    cond: int
    trajectories: List[Trajectory]
    rewards: Optional[np.ndarray] = None
    advantages: Optional["AdvantageSet"] = None
    window: Tuple[int, int] = (0, 0)
    reward_source: str = "endpoint"

    def __post_init__(self):
        if self.window == (0, 0) and self.trajectories:
            grid = self.trajectories[0].grid
            lo = max(t.stop for t in self.trajectories)
            self.window = (lo, grid.T)

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def is_empty(self) -> bool:
        return len(self.trajectories) == 0

    def eligible_transitions(self, k: int) -> List[int]:
        """Stochastic transitions of member k inside the window, descending."""
        lo, hi = self.window
        traj = self.trajectories[k]
        return [n for n in range(hi, lo, -1) if traj.has_transition(n) and traj.variance(n) > 0.0]

    def advantage_array(self) -> np.ndarray:
        if self.advantages is None:
            raise ValueError("group advantages not computed")
        return np.asarray(self.advantages.advantages, dtype=np.float64)


def select_transitions(group: RolloutGroup, fraction: float, rng: Optional[np.random.Generator]) -> Selection:
    """
    Uniform subset of each member's eligible transitions, without replacement.

    Each member keeps max(1, int(fraction·n_eligible)) transitions. A
    fraction of 1 keeps everything and needs no generator.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"timestep fraction must lie in (0, 1], got {fraction}")
    selection: Selection = {}
    for k in range(len(group)):
        eligible = group.eligible_transitions(k)
        if not eligible:
            continue
        if fraction >= 1.0:
            selection[k] = eligible
            continue
        if rng is None:
            raise ValueError("a generator is required when timestep fraction < 1")
        m = max(1, int(fraction * len(eligible)))
        chosen = rng.permutation(len(eligible))[:m]
        selection[k] = sorted((eligible[i] for i in chosen), reverse=True)
    return selection


@dataclass
class TransitionBatch:
    """Selected transitions of one group, stacked row-wise."""
    x: torch.Tensor
    observed: torch.Tensor
    t_from: torch.Tensor
    t_to: torch.Tensor
    eps: torch.Tensor
    c: torch.Tensor
    traj_index: np.ndarray
    step: np.ndarray

    def __len__(self) -> int:
        return len(self.traj_index)

    @property
    def variance(self) -> torch.Tensor:
        return self.eps ** 2 * (self.t_from - self.t_to)


def gather_transitions(group: RolloutGroup, selection: Selection) -> TransitionBatch:
    """
    Stack the selected transitions in (member, step) order.

    Raises:
        MissingTransitionError: if a selected transition was not recorded
        WindowViolationError: if it lies outside the group's window
    """
    lo, hi = group.window
    xs, obs, tf, tt, eps, cs, ks, ns = [], [], [], [], [], [], [], []
    for k in sorted(selection):
        traj = group.trajectories[k]
        for n in selection[k]:
            if not lo < n <= hi:
                raise WindowViolationError(f"step {n} of trajectory {k} outside window {group.window}")
            if not traj.has_transition(n):
                raise MissingTransitionError(k, n)
            xs.append(traj.states[n])
            obs.append(traj.states[n - 1])
            tf.append(traj.grid.t(n))
            tt.append(traj.grid.t(n - 1))
            eps.append(traj.eps[n])
            cs.append(traj.cond)
            ks.append(k)
            ns.append(n)
    d = group.trajectories[0].dim if group.trajectories else 0
    return TransitionBatch(
        x=torch.as_tensor(np.asarray(xs, dtype=np.float64).reshape(-1, d)),
        observed=torch.as_tensor(np.asarray(obs, dtype=np.float64).reshape(-1, d)),
        t_from=torch.tensor(tf, dtype=DTYPE),
        t_to=torch.tensor(tt, dtype=DTYPE),
        eps=torch.tensor(eps, dtype=DTYPE),
        c=torch.tensor(cs, dtype=torch.long),
        traj_index=np.asarray(ks, dtype=np.int64),
        step=np.asarray(ns, dtype=np.int64),
    )


def policy_means(model: VelocityModel, batch: TransitionBatch) -> torch.Tensor:
    """Transition means μ_θ(x_t, t) of every row, differentiable in θ."""
    v = model(batch.x, batch.t_from, batch.c)
    dt = (batch.t_from - batch.t_to)[:, None]
    eps2 = (batch.eps ** 2)[:, None]
    score = _score(batch.x, v, batch.t_from[:, None])
    return batch.x - dt * (v + 0.5 * eps2 * score)
