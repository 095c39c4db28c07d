"""
Stochastic exploration for flow models.

The reverse-time SDE is discretized with Euler-Maruyama. For a step from
t_from down to t_to (Δt = t_from − t_to):

    S      = (x − (1−t)·x̂0) / t²          x̂0 = x − t·v
    μ      = x − Δt·(v + ½ε²·S)
    x_next = μ + ε·√Δt·z                  z ~ N(0, I)

S is the negated Gaussian-path score, so the drift is v − ½ε²∇log p_t and
the SDE shares its marginals with the probability-flow ODE. The last step
into t = 0 is always deterministic.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import torch

from .model import VelocityModel
from .seeding import KeyedRNG
from .trajectory import TimeGrid, Trajectory

logger = logging.getLogger(__name__)

NOISE_MODES = ("constant", "linear")


class ScoreSingularityError(ValueError):
    """Raised when the score term is requested too close to t = 0."""
    pass


class NonFiniteStateError(FloatingPointError):
    """Raised when a sampler step produces NaN or Inf."""

    def __init__(self, step: int, what: str):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


class DegenerateTransitionError(ValueError):
    """Raised when a log-density is requested for a zero-variance transition."""
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """
    Noise level ε_t of the exploration SDE.

    ``constant`` uses ε_t = η, giving per-step variance η²Δt. ``linear``
    scales it as ε_t = η·t_from.
    """
    eta: float = 0.3
    mode: str = "constant"

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if self.mode not in NOISE_MODES:
            raise ValueError(f"Unknown noise mode '{self.mode}'. Available: {', '.join(NOISE_MODES)}")

    def eps(self, t_from: float, t_to: float) -> float:
        if t_to <= 0.0:
            return 0.0
        if self.mode == "linear":
            return self.eta * t_from
        return self.eta


@dataclass
class TransitionStats:
    """Gaussian transition N(mean, variance·I) and the state actually drawn."""
    mean: np.ndarray
    variance: float
    observed: np.ndarray
    noise: Optional[np.ndarray] = None
    velocity: Optional[np.ndarray] = None


def score_term(x, v, t: float, t_floor: float = 0.0):
    """
    (x − (1−t)·x̂0)/t² with x̂0 = x − t·v.

    Examples:
        >>> score_term(np.array([1.0, 0.0]), np.array([0.0, 0.0]), 0.5).tolist()
        [2.0, 0.0]

    Raises:
        ScoreSingularityError: if t ≤ t_floor
    """
    if t <= t_floor:
        raise ScoreSingularityError(f"score singular near t=0 (t={t}, floor={t_floor})")
    return _score(x, v, t)


def _score(x, v, t):
    x_hat0 = x - t * v
    return (x - (1.0 - t) * x_hat0) / t ** 2


def transition_mean(x, v, t_from, t_to, eps: float):
    """
    μ = x − Δt·(v + ½ε²·S); numpy or torch.

    ``t_from``/``t_to`` may be floats or per-row torch columns. With ε = 0
    this is exactly the Euler step x − Δt·v.

    Time runs from noise (t = 1) to data (t = 0), so Δt = t_from − t_to is
    positive and v points from data toward noise, hence the minus sign.
    """
    dt = t_from - t_to
    if eps == 0.0:
        return x - dt * v
    return x - dt * (v + 0.5 * eps ** 2 * _score(x, v, t_from))


def sde_step(
    model: VelocityModel,
    x: np.ndarray,
    t_from: float,
    t_to: float,
    sched: NoiseSchedule,
    rng: Optional[np.random.Generator],
    cond: int,
    z: Optional[np.ndarray] = None,
    v: Optional[np.ndarray] = None,
    t_floor: float = 0.0,
    step: Optional[int] = None,
):
    """
    One Euler-Maruyama step of the exploration SDE.

    Args:
        model: Policy evaluated at (x, t_from)
        x: Current state
        t_from, t_to: Step endpoints, t_from > t_to ≥ 0
        sched: Noise schedule
        rng: Source of z when ``z`` is not pinned
        cond: Condition index
        z: Optional pinned standard-normal draw
        v: Optional cached velocity at (x, t_from)
        t_floor: Smallest time at which the score may be evaluated
        step: Transition index, used in error messages

    Returns:
        (x_next, TransitionStats)
    """
    if not t_from > t_to >= 0.0:
        raise ValueError(f"need t_from > t_to >= 0, got {t_from}, {t_to}")
    x = np.asarray(x, dtype=np.float64)
    step = step if step is not None else -1
    eps = sched.eps(t_from, t_to)
    dt = t_from - t_to

    if v is None:
        v = model.velocity(x, t_from, cond)
    if eps > 0.0 and t_from <= t_floor:
        raise ScoreSingularityError(f"score singular near t=0 (t={t_from}, floor={t_floor})")
    mean = transition_mean(x, v, t_from, t_to, eps)
    if not np.all(np.isfinite(mean)):
        raise NonFiniteStateError(step, "transition mean")

    if eps > 0.0:
        if z is None:
            z = rng.standard_normal(x.shape[-1])
        x_next = mean + eps * math.sqrt(dt) * z
    else:
        z = np.zeros_like(x)
        x_next = mean
    if not np.all(np.isfinite(x_next)):
        raise NonFiniteStateError(step, "state")

    stats = TransitionStats(mean=mean, variance=eps ** 2 * dt, observed=x_next, noise=z, velocity=v)
    return x_next, stats


def advance(
    model: VelocityModel,
    traj: Trajectory,
    sched: NoiseSchedule,
    rng: KeyedRNG,
    index: int,
    stop_at: int,
) -> Trajectory:
    """
    Continue one trajectory in place down to knot ``stop_at``.

    The draw for transition n comes from ``rng.generator(index, n)``. A
    velocity already cached at the current knot is reused.
    """
    grid = traj.grid
    t_floor = grid.t(1)
    while traj.stop > stop_at:
        n = traj.stop
        x = traj.states[n]
        cached = traj.velocities[n]
        v = None if np.isnan(cached).any() else cached
        eps = sched.eps(grid.t(n), grid.t(n - 1))
        gen = rng.generator(index, n) if eps > 0.0 else None
        x_next, stats = sde_step(
            model, x, grid.t(n), grid.t(n - 1), sched, gen, traj.cond,
            v=v, t_floor=t_floor, step=n,
        )
        traj.velocities[n] = stats.velocity
        traj.means[n] = stats.mean
        traj.noises[n] = stats.noise
        traj.eps[n] = eps
        traj.states[n - 1] = x_next
        if gen is not None:
            traj.draw_keys[n] = rng.key(index, n)
        traj.stop = n - 1
    return traj


def rollout(
    model: VelocityModel,
    init: Sequence[np.ndarray],
    grid: TimeGrid,
    cond: int,
    sched: NoiseSchedule,
    rng: KeyedRNG,
    stop_at: int = 0,
) -> List[Trajectory]:
    """
    Sample one trajectory per initial state from t=1 down to knot ``stop_at``.

    Trajectories are sampled one at a time, each on its own keyed stream,
    so results do not depend on group size or ordering.
    """
    if len(init) == 0:
        raise ValueError("rollout needs at least one initial state")
    if not 0 <= stop_at <= grid.T:
        raise ValueError(f"stop_at must lie in 0..{grid.T}, got {stop_at}")
    trajectories = []
    for k, x_init in enumerate(init):
        traj = Trajectory.start(x_init, grid, cond)
        trajectories.append(advance(model, traj, sched, rng, k, stop_at))
    return trajectories


def transition_stats(traj: Trajectory, n: int) -> TransitionStats:
    """Recorded statistics of transition n."""
    if not traj.has_transition(n):
        raise KeyError(f"transition {n} not recorded (trajectory stopped at knot {traj.stop})")
    return TransitionStats(
        mean=traj.means[n],
        variance=traj.variance(n),
        observed=traj.states[n - 1],
        noise=traj.noises[n],
        velocity=traj.velocities[n],
    )


def transition_log_density(stats: TransitionStats) -> float:
    """
    log N(observed; mean, variance·I).

    Raises:
        DegenerateTransitionError: if variance ≤ 0
    """
    if not stats.variance > 0.0:
        raise DegenerateTransitionError("degenerate transition")
    diff = np.asarray(stats.observed, dtype=np.float64) - np.asarray(stats.mean, dtype=np.float64)
    d = diff.shape[-1]
    return float(
        -np.dot(diff, diff) / (2.0 * stats.variance)
        - 0.5 * d * math.log(2.0 * math.pi * stats.variance)
    )


def gaussian_log_density(mean: torch.Tensor, observed: torch.Tensor, variance: torch.Tensor) -> torch.Tensor:
    """Row-wise differentiable counterpart of transition_log_density."""
    d = mean.shape[-1]
    sq = ((observed - mean) ** 2).sum(dim=-1)
    return -sq / (2.0 * variance) - 0.5 * d * torch.log(2.0 * math.pi * variance)


def replay(model: VelocityModel, traj: Trajectory, sched: NoiseSchedule) -> Trajectory:
    """Re-run a trajectory from its initial state using the recorded draws."""
    grid = traj.grid
    out = Trajectory.start(traj.x_init, grid, traj.cond)
    t_floor = grid.t(1)
    for n in traj.transitions():
        x_next, stats = sde_step(
            model, out.states[n], grid.t(n), grid.t(n - 1), sched, None, traj.cond,
            z=traj.noises[n], t_floor=t_floor, step=n,
        )
        out.velocities[n] = stats.velocity
        out.means[n] = stats.mean
        out.noises[n] = stats.noise
        out.eps[n] = sched.eps(grid.t(n), grid.t(n - 1))
        out.states[n - 1] = x_next
        out.stop = n - 1
    out.draw_keys = dict(traj.draw_keys)
    return out
