"""
Consistency regularization across sampling steps.

For consecutive states (x_n, x_{n−1}) of a trajectory the current model's
single-step clean estimate at knot n is pulled toward the old model's
estimate at knot n−1. Only low-noise steps (t_n ≤ τ) take part. The target
is computed without gradient and reuses the velocities cached at rollout.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .constants import DEFAULT_CPGO_TAU, DEFAULT_CPGO_WEIGHT, SCALING_BAND
from .dgr import dual_group_loss
from .flow import ode_sample, predict_clean
from .groups import RolloutGroup
from .model import DTYPE, VelocityModel
from .objectives import ClipConfig, ddpo_loss, dpo_group_loss
from .records import ReportLine
from .trajectory import TimeGrid, Trajectory

logger = logging.getLogger(__name__)

BASE_OBJECTIVES = ("grpo", "ddpo", "dpo")

# A condition's rollout: complete 𝒢₁ plus optional partial 𝒢₂.
DualGroup = Tuple[RolloutGroup, Optional[RolloutGroup]]


@dataclass(frozen=True)
class CpgoConfig:
    omega: float = DEFAULT_CPGO_WEIGHT
    tau: float = DEFAULT_CPGO_TAU

    def __post_init__(self):
        if self.omega < 0:
            raise ValueError(f"omega must be >= 0, got {self.omega}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")


@dataclass
class CpgoTerm:
    """Consistency loss and the number of steps that entered it."""
    loss: torch.Tensor
    eligible: int

    @property
    def empty(self) -> bool:
        return self.eligible == 0


def _old_prediction(old_model: VelocityModel, traj: Trajectory, n: int) -> np.ndarray:
    if n == 0:
        return traj.states[0].copy()
    v = traj.velocities[n]
    if np.isnan(v).any():
        v = old_model.velocity(traj.states[n], traj.grid.t(n), traj.cond)
    return traj.states[n] - traj.grid.t(n) * v


def cpgo_loss(
    model: VelocityModel,
    old_model: VelocityModel,
    trajectories: Sequence[Trajectory],
    cfg: CpgoConfig,
) -> CpgoTerm:
    """
    Mean over eligible steps of ‖π_θ(x_n, t_n) − sg(π_old(x_{n−1}, t_{n−1}))‖².

    A step is eligible when t_n ≤ τ. With none eligible the loss is a
    constant zero and a warning is logged.
    """
    xs, ts, cs, targets = [], [], [], []
    for traj in trajectories:
        for n in traj.transitions():
            t_n = traj.grid.t(n)
            if t_n > cfg.tau:
                continue
            xs.append(traj.states[n])
            ts.append(t_n)
            cs.append(traj.cond)
            targets.append(_old_prediction(old_model, traj, n - 1))
    if not xs:
        logger.warning(f"cpgo: no eligible steps (tau={cfg.tau})")
        return CpgoTerm(loss=torch.zeros((), dtype=DTYPE), eligible=0)

    x = torch.as_tensor(np.asarray(xs, dtype=np.float64))
    t = torch.tensor(ts, dtype=DTYPE)
    c = torch.tensor(cs, dtype=torch.long)
    target = torch.as_tensor(np.asarray(targets, dtype=np.float64))
    pred = predict_clean(model, x, t, c)
    loss = ((pred - target) ** 2).sum(dim=-1).mean()
    return CpgoTerm(loss=loss, eligible=len(xs))


@dataclass
class CombinedLoss:
    total: torch.Tensor
    base: torch.Tensor
    cpgo: CpgoTerm


def combined_loss(
    model: VelocityModel,
    old_model: VelocityModel,
    groups: Sequence[DualGroup],
    clip: ClipConfig,
    fraction: float,
    cfg: CpgoConfig,
    rng: Optional[np.random.Generator] = None,
    base: str = "grpo",
    ref_model: Optional[VelocityModel] = None,
    beta: float = 1.0,
    ddpo_group_based: bool = True,
) -> CombinedLoss:
    """
    Base policy loss plus ω·cpgo_loss.

    ``base`` selects the policy objective: the dual-group GRPO loss averaged
    over conditions, DDPO over all groups, or DPO over preference pairs
    against ``ref_model``. With ω = 0 the base loss is returned unchanged.
    """
    if base not in BASE_OBJECTIVES:
        raise ValueError(f"Unknown base objective '{base}'. Available: {', '.join(BASE_OBJECTIVES)}")
    if not groups:
        raise ValueError("combined loss needs at least one group")

    flat = [g for pair in groups for g in pair if g is not None and not g.is_empty]
    if base == "grpo":
        parts = [dual_group_loss(model, old_model, g1, g2, clip, fraction, rng) for g1, g2 in groups]
        base_loss = parts[0] if len(parts) == 1 else sum(parts) / len(parts)
    elif base == "ddpo":
        base_loss = ddpo_loss(model, old_model, flat, fraction, rng, group_based=ddpo_group_based)
    else:
        if ref_model is None:
            raise ValueError("dpo base objective needs a reference model")
        base_loss = dpo_group_loss(model, ref_model, flat, beta, fraction, rng)

    if cfg.omega == 0.0:
        empty = CpgoTerm(loss=torch.zeros((), dtype=DTYPE), eligible=0)
        return CombinedLoss(total=base_loss, base=base_loss, cpgo=empty)
    term = cpgo_loss(model, old_model, [t for g in flat for t in g.trajectories], cfg)
    return CombinedLoss(total=base_loss + cfg.omega * term.loss, base=base_loss, cpgo=term)


@dataclass
class ScalingRow:
    T: int
    dt: float
    gap_rms: float
    gap_ms: float
    ratio_vs_half: Optional[float] = None
    ratio_rms: Optional[float] = None
    skipped: int = 0


@dataclass
class ScalingReport:
    rows: List[ScalingRow] = field(default_factory=list)
    band: Tuple[float, float] = SCALING_BAND
    checked: int = 2

    @property
    def passed(self) -> bool:
        ratios = [r.ratio_vs_half for r in self.rows if r.ratio_vs_half is not None]
        tail = ratios[-self.checked:]
        if len(tail) < self.checked:
            return False
        lo, hi = self.band
        return all(lo <= r <= hi for r in tail)

    def lines(self) -> List[str]:
        out = ["dt, gap_rms, gap_ms, ratio_rms, ratio_vs_half"]
        for r in self.rows:
            ratio = "-" if r.ratio_vs_half is None else f"{r.ratio_vs_half:.4f}"
            ratio_rms = "-" if r.ratio_rms is None else f"{r.ratio_rms:.4f}"
            out.append(f"{r.dt:.6g}, {r.gap_rms:.6e}, {r.gap_ms:.6e}, {ratio_rms}, {ratio}")
        out.append("PASS" if self.passed else "FAIL")
        return out

    def report_line(self) -> ReportLine:
        ratios = [r.ratio_vs_half for r in self.rows if r.ratio_vs_half is not None][-self.checked:]
        worst = max((abs(r - 4.0) / 4.0 for r in ratios), default=math.inf)
        return ReportLine(name="consistency_scaling", value=worst,
                          tolerance=(self.band[1] - self.band[0]) / 8.0, passed=self.passed)


def consistency_gaps(model: VelocityModel, traj: Trajectory) -> np.ndarray:
    """‖π(x_n, t_n) − π(x_{n−1}, t_{n−1})‖ for every recorded transition n."""
    preds = {}
    for n in traj.visited_knots():
        x = traj.states[n]
        t = traj.grid.t(n)
        v = traj.velocities[n]
        if n == 0:
            preds[n] = x
        elif np.isnan(v).any():
            preds[n] = x - t * model.velocity(x, t, traj.cond)
        else:
            preds[n] = x - t * v
    return np.array([np.linalg.norm(preds[n] - preds[n - 1]) for n in traj.transitions()])


def verify_consistency_scaling(
    model: VelocityModel,
    grids: Sequence[TimeGrid],
    probes: Sequence[Tuple[np.ndarray, int]],
    band: Tuple[float, float] = SCALING_BAND,
) -> ScalingReport:
    """
    Consistency gap along deterministic trajectories on successively halved grids.

    ``ratio_vs_half`` compares mean-squared gaps of consecutive grids and is
    the gated value; for a first-order solver it approaches 4. The per-step
    gap itself shrinks linearly with the step, so ``ratio_rms`` approaches 2
    and is reported alongside.
    """
    report = ScalingReport(band=band)
    prev_ms = None
    for grid in grids:
        sq, skipped = [], 0
        for x1, c in probes:
            gaps = consistency_gaps(model, ode_sample(model, x1, grid, c))
            if not np.all(np.isfinite(gaps)):
                skipped += 1
                logger.warning(f"consistency probe skipped: non-finite gap on T={grid.T}")
                continue
            sq.extend(gaps ** 2)
        gap_ms = float(np.mean(sq)) if sq else math.nan
        row = ScalingRow(T=grid.T, dt=1.0 / grid.T, gap_rms=math.sqrt(gap_ms), gap_ms=gap_ms, skipped=skipped)
        if prev_ms is not None and gap_ms > 0:
            row.ratio_vs_half = prev_ms / gap_ms
            row.ratio_rms = math.sqrt(row.ratio_vs_half)
        report.rows.append(row)
        prev_ms = gap_ms
    return report
