"""
Rollout diagnostics on the pretrained model.

- fine vs coarse groups: final-sample diversity, initial-state diversity
  and reward contrast over many seeds
- coarse-perception quality: rank correlation between rewards of
  single-step estimates at knot t_s and rewards of the finished samples,
  swept over t_s
- perception cosine similarity between consecutive probe knots
- few-step sampling: mean reward of deterministic samples on coarse grids
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from .config import ExperimentConfig
from .dgr import init_group_noises
from .engine import eval_probes, load_pretrained
from .flow import ode_sample
from .groups import Granularity
from .model import VelocityModel
from .rewards import RewardFunction, create_reward, group_contrast, group_diversity, mean_cosine_similarity, rank_correlation
from .sde import rollout
from .seeding import KeyedRNG, Stream
from .trajectory import TimeGrid, Trajectory

logger = logging.getLogger(__name__)

REPORT_FILE = "diagnostics.txt"
CORRELATION_SEEDS = 50
FEW_STEP_COUNTS = (1, 2, 4, 8, 16)
# Keeps diagnostic draws apart from fine-tuning iterations.
DIAG_KEY = 1 << 21


@dataclass
class DiversityRow:
    seed: int
    fine_init: float
    fine_final: float
    coarse_init: float
    coarse_final: float
    fine_contrast: float
    coarse_contrast: float


@dataclass
class CorrelationRow:
    knot: int
    t: float
    correlation: float
    cosine_to_next: Optional[float] = None


@dataclass
class DiagnosticsReport:
    diversity: List[DiversityRow] = field(default_factory=list)
    correlation: List[CorrelationRow] = field(default_factory=list)
    few_step: Dict[int, float] = field(default_factory=dict)

    @property
    def coarse_wins(self) -> int:
        return sum(1 for r in self.diversity if r.coarse_final > r.fine_final)

    @property
    def fine_init_zero(self) -> bool:
        return all(r.fine_init == 0.0 for r in self.diversity)

    @property
    def correlation_trend_ok(self) -> bool:
        """Non-decreasing toward the clean end, one inversion allowed."""
        ordered = [r.correlation for r in sorted(self.correlation, key=lambda r: -r.knot)]
        inversions = sum(1 for a, b in zip(ordered, ordered[1:]) if b < a)
        return len(ordered) >= 2 and inversions <= 1

    def lines(self) -> List[str]:
        out = ["# diversity", "seed, fine_init, fine_final, coarse_init, coarse_final, fine_contrast, coarse_contrast"]
        for r in self.diversity:
            out.append(
                f"{r.seed}, {r.fine_init:.6g}, {r.fine_final:.6g}, {r.coarse_init:.6g}, "
                f"{r.coarse_final:.6g}, {r.fine_contrast:.6g}, {r.coarse_contrast:.6g}"
            )
        out.append(f"coarse_wins, {self.coarse_wins}/{len(self.diversity)}")
        out.append(f"fine_init_zero, {self.fine_init_zero}")
        out.extend(["", "# perception correlation", "knot, t, spearman, cosine_to_next"])
        for r in self.correlation:
            cos = "-" if r.cosine_to_next is None else f"{r.cosine_to_next:.6f}"
            out.append(f"{r.knot}, {r.t:.6f}, {r.correlation:.6f}, {cos}")
        out.append(f"trend_ok, {self.correlation_trend_ok}")
        out.extend(["", "# few-step sampling", "steps, mean_reward"])
        out.extend(f"{steps}, {reward:.6f}" for steps, reward in self.few_step.items())
        return out

    def to_text(self) -> str:
        return "\n".join(self.lines()) + "\n"


def default_probe_knots(T: int) -> List[int]:
    """Every second interior knot, noisiest first."""
    return list(range(T - 2, 0, -2)) or [max(T - 1, 1)]


def sample_group(
    model: VelocityModel,
    config: ExperimentConfig,
    granularity: Granularity,
    seed_index: int,
    cond: int,
) -> List[Trajectory]:
    tag = 0 if granularity == Granularity.FINE else 1
    init = init_group_noises(granularity, config.group_size, config.data_dim,
                             KeyedRNG(config.seed, Stream.INIT_NOISE, (DIAG_KEY, seed_index, tag)))
    sde_rng = KeyedRNG(config.seed, Stream.SDE, (DIAG_KEY, seed_index, tag))
    return rollout(model, init, config.grid(), cond, config.noise_schedule(), sde_rng)


def diversity_table(model: VelocityModel, config: ExperimentConfig, reward: RewardFunction,
                    progress: bool = False) -> List[DiversityRow]:
    rows = []
    for s in tqdm(range(config.diag_seeds), desc="diversity", disable=not progress):
        cond = s % config.n_modes
        fine = sample_group(model, config, Granularity.FINE, s, cond)
        coarse = sample_group(model, config, Granularity.COARSE, s, cond)
        rows.append(DiversityRow(
            seed=s,
            fine_init=group_diversity([t.x_init for t in fine]),
            fine_final=group_diversity([t.endpoint for t in fine]),
            coarse_init=group_diversity([t.x_init for t in coarse]),
            coarse_final=group_diversity([t.endpoint for t in coarse]),
            fine_contrast=group_contrast(reward.evaluate_many([t.endpoint for t in fine], cond)),
            coarse_contrast=group_contrast(reward.evaluate_many([t.endpoint for t in coarse], cond)),
        ))
    return rows


def perception_at(traj: Trajectory, knot: int) -> np.ndarray:
    """Single-step clean estimate from the velocity recorded at ``knot``."""
    if knot == 0:
        return traj.states[0].copy()
    return traj.states[knot] - traj.grid.t(knot) * traj.velocities[knot]


def correlation_table(model: VelocityModel, config: ExperimentConfig, reward: RewardFunction,
                      knots: Sequence[int], n_seeds: int = CORRELATION_SEEDS,
                      progress: bool = False) -> List[CorrelationRow]:
    """
    Mean Spearman correlation per probe knot over ``n_seeds`` coarse groups.

    A complete rollout visits every knot with the same keyed draws a
    rollout stopped at that knot would use, so one trajectory serves every
    probe knot.
    """
    grid = config.grid()
    corr = {k: [] for k in knots}
    cos = {k: [] for k in knots}
    for s in tqdm(range(n_seeds), desc="correlation", disable=not progress):
        cond = s % config.n_modes
        trajs = sample_group(model, config, Granularity.COARSE, s, cond)
        final = reward.evaluate_many([t.endpoint for t in trajs], cond)
        for i, k in enumerate(knots):
            perceived = [perception_at(t, k) for t in trajs]
            corr[k].append(rank_correlation(reward.evaluate_many(perceived, cond), final))
            if i + 1 < len(knots):
                nxt = [perception_at(t, knots[i + 1]) for t in trajs]
                cos[k].append(mean_cosine_similarity(perceived, nxt))
    return [
        CorrelationRow(knot=k, t=grid.t(k), correlation=float(np.mean(corr[k])),
                       cosine_to_next=float(np.mean(cos[k])) if cos[k] else None)
        for k in knots
    ]


def few_step_rewards(model: VelocityModel, config: ExperimentConfig, reward: RewardFunction,
                     counts: Sequence[int] = FEW_STEP_COUNTS) -> Dict[int, float]:
    probes = eval_probes(config)
    out = {}
    for steps in counts:
        grid = TimeGrid.build(steps, config.shift)
        out[steps] = float(np.mean([reward.evaluate(ode_sample(model, x1, grid, c).endpoint, c) for x1, c in probes]))
    return out


def run_diagnostics(config: ExperimentConfig, out_dir: Optional[Path] = None,
                    progress: bool = False) -> DiagnosticsReport:
    """Diversity, contrast, perception-correlation and few-step tables for the pretrained model."""
    model = load_pretrained(config)
    reward = create_reward(config.reward_spec())
    knots = list(config.diag_knots) if config.diag_knots else default_probe_knots(config.num_steps)

    report = DiagnosticsReport(
        diversity=diversity_table(model, config, reward, progress),
        correlation=correlation_table(model, config, reward, knots, min(CORRELATION_SEEDS, config.diag_seeds), progress),
        few_step=few_step_rewards(model, config, reward),
    )
    logger.info(
        f"diagnose: coarse diversity wins {report.coarse_wins}/{len(report.diversity)}, "
        f"correlation trend {'ok' if report.correlation_trend_ok else 'broken'}"
    )

    out = Path(out_dir) if out_dir is not None else config.out_path
    out.mkdir(parents=True, exist_ok=True)
    (out / REPORT_FILE).write_text(report.to_text(), encoding="utf-8")
    return report
