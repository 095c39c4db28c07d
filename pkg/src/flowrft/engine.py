"""
Fine-tuning engine.

Drives pretraining and the reinforcement fine-tuning loop:

- freeze θ_old at the start of every iteration
- for each sampled condition, walk the per-condition phase table: noise
  initialization, window (or full) rollout, coarse perception,
  representative selection, refinement and scoring
- optimize the combined objective over all groups
- append one MetricsRecord per iteration and save the final checkpoint
"""

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from tqdm import tqdm

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .cpgo import CombinedLoss, DualGroup, combined_loss
from .data import MixtureSpec, energy_distance, sample_condition, sample_mixture
from .dgr import (
    SelectionResult,
    cache_velocities,
    coarse_progress_perception,
    count_step_units,
    init_group_noises,
    refine_fine_grained,
    schedule_granularity,
    select_representatives,
)
from .flow import PretrainConfig, ode_sample, pretrain, write_loss_history
from .groups import Granularity, RolloutGroup
from .model import VelocityModel
from .objectives import AdvantageSet, group_advantages
from .records import MetricsRecord, SelectionRecord
from .rewards import RewardFunction, create_reward, group_diversity
from .sde import rollout
from .seeding import KeyedRNG, Stream, keyed_rng
from .state import ActionType, Phase, PhaseMachine
from .stream_log import NdjsonWriter
from .trajectory import Trajectory, dump_trajectories
from .vh.metrics import latent_consistency

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.ndjson"
SELECTIONS_FILE = "selections.ndjson"
FINETUNED_CHECKPOINT = "finetuned.ckpt"


class FinetuneError(RuntimeError):
    """A module error raised inside the loop, tagged with where it happened."""

    def __init__(self, iteration: int, condition: Optional[int], cause: Exception):
        where = f"iteration {iteration}" + (f", condition {condition}" if condition is not None else "")
        super().__init__(f"{where}: {type(cause).__name__}: {cause}")
        self.iteration = iteration
        self.condition = condition
        self.cause = cause


@dataclass
class ConditionRollout:
    """Everything one condition contributes to an iteration."""
    cond: int
    granularity: Granularity
    phase: Phase = Phase.CREATED
    trajectories: List[Trajectory] = field(default_factory=list)
    perceptions: List[np.ndarray] = field(default_factory=list)
    selection: Optional[SelectionResult] = None
    g1: Optional[RolloutGroup] = None
    g2: Optional[RolloutGroup] = None

    @property
    def dual_group(self) -> DualGroup:
        return self.g1, self.g2


@dataclass
class FinetuneResult:
    model: VelocityModel
    records: List[MetricsRecord]
    checkpoint: Optional[Path] = None


@dataclass
class PretrainOutcome:
    model: VelocityModel
    checkpoint: Path
    final_loss: float
    energy_distance: float


def eval_probes(config: ExperimentConfig) -> List[Tuple[np.ndarray, int]]:
    """Fixed (initial noise, condition) pairs for per-iteration evaluation."""
    return [
        (keyed_rng(config.seed, Stream.EVAL, i).standard_normal(config.data_dim), i % config.n_modes)
        for i in range(config.eval_probes)
    ]


def evaluate_policy(
    model: VelocityModel,
    config: ExperimentConfig,
    reward: RewardFunction,
    probes: List[Tuple[np.ndarray, int]],
) -> Tuple[float, float, List[Trajectory]]:
    """Mean latent consistency and mean reward of deterministic samples."""
    if not probes:
        return math.nan, math.nan, []
    grid = config.grid()
    trajs = [ode_sample(model, x1, grid, c) for x1, c in probes]
    consistency = float(np.mean([latent_consistency(t) for t in trajs]))
    rewards = [reward.evaluate(t.endpoint, t.cond) for t in trajs]
    return consistency, float(np.mean(rewards)), trajs


class FinetuneEngine:
    """
    The fine-tuning loop for one configuration.

    The engine owns the optimizer and every file it writes. All randomness
    comes from keyed streams, so two engines with the same config and seed
    produce identical records and parameters.
    """

    def __init__(
        self,
        config: ExperimentConfig,
        model: VelocityModel,
        ref_model: Optional[VelocityModel] = None,
        out_dir: Optional[Path] = None,
        progress: bool = False,
    ):
        self.config = config
        self.model = model
        self.ref_model = ref_model or model.frozen_copy()
        self.out_dir = Path(out_dir) if out_dir is not None else config.out_path
        self.progress = progress

        self.grid = config.grid()
        self.sched = config.noise_schedule()
        self.clip = config.clip()
        self.cpgo = config.cpgo()
        self.schedule = config.granularity_schedule()
        self.reward = create_reward(config.reward_spec())
        self.phases = PhaseMachine(intra_group=config.intra_group)
        self.probes = eval_probes(config)
        self.optimizer = torch.optim.AdamW(
            self.model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
        )
        self.last_rollouts: List[ConditionRollout] = []

        if config.grad_accum_steps > 1:
            logger.debug(f"grad_accum_steps={config.grad_accum_steps} has no effect at this scale")

    # ---- per-condition phases -------------------------------------------------

    def _conditions(self, iteration: int) -> List[int]:
        rng = keyed_rng(self.config.seed, Stream.CONDITIONS, iteration)
        return [int(c) for c in rng.integers(0, self.config.n_modes, size=self.config.prompts_per_iteration)]

    def _init_noise(self, state: ConditionRollout, iteration: int, slot: int) -> List[np.ndarray]:
        rng = KeyedRNG(self.config.seed, Stream.INIT_NOISE, (iteration, slot))
        return init_group_noises(state.granularity, self.config.group_size, self.config.data_dim, rng)

    def _sde_rng(self, iteration: int, slot: int) -> KeyedRNG:
        return KeyedRNG(self.config.seed, Stream.SDE, (iteration, slot))

    def _advantages(self, rewards: np.ndarray) -> AdvantageSet:
        # A lone representative (cluster_size 1) has nothing to be compared with.
        if len(rewards) < 2:
            return AdvantageSet(rewards=rewards, mean=float(rewards.mean()), std=0.0,
                                advantages=np.zeros_like(rewards))
        return group_advantages(rewards, adv_clip=self.config.adv_clip_max)

    def _score(self, state: ConditionRollout) -> None:
        cfg = self.config
        if state.selection is None:
            rewards = self.reward.evaluate_many([t.endpoint for t in state.trajectories], state.cond)
            state.g1 = RolloutGroup(state.granularity, state.cond, state.trajectories, rewards=rewards,
                                    advantages=self._advantages(rewards))
            return

        g1_trajs = [state.trajectories[i] for i in state.selection.g1_indices]
        rewards = self.reward.evaluate_many([t.endpoint for t in g1_trajs], state.cond)
        state.g1 = RolloutGroup(state.granularity, state.cond, g1_trajs, rewards=rewards,
                                advantages=self._advantages(rewards))

        g2_idx = state.selection.g2_indices
        if len(g2_idx) < 2:
            if g2_idx:
                logger.debug(f"cond {state.cond}: single leftover member, 𝒢₂ dropped")
            state.g2 = None
            return
        g2_trajs = [state.trajectories[i] for i in g2_idx]
        perceived = [state.perceptions[i] for i in g2_idx]
        rewards = self.reward.evaluate_many(perceived, state.cond)
        state.g2 = RolloutGroup(
            state.granularity, state.cond, g2_trajs, rewards=rewards,
            advantages=self._advantages(rewards),
            window=(cfg.perception_knot, self.grid.T), reward_source="perception",
        )

    def rollout_condition(self, old_model: VelocityModel, iteration: int, slot: int, cond: int,
                          granularity: Granularity) -> ConditionRollout:
        """Run one condition through the phase table until it is scored."""
        cfg = self.config
        state = ConditionRollout(cond=cond, granularity=granularity)
        noises: List[np.ndarray] = []
        while True:
            action = self.phases.get_next_action(state.phase)
            if action.type == ActionType.EXIT:
                return state

            if action.type == ActionType.INIT_NOISE:
                noises = self._init_noise(state, iteration, slot)
                event = "init"
            elif action.type == ActionType.ROLLOUT:
                partial = action.payload["partial"]
                stop_at = cfg.perception_knot if partial else 0
                state.trajectories = rollout(old_model, noises, self.grid, cond, self.sched,
                                             self._sde_rng(iteration, slot), stop_at=stop_at)
                event = "partial" if partial else "full"
            elif action.type == ActionType.PERCEIVE:
                cache_velocities(old_model, state.trajectories)
                state.perceptions = coarse_progress_perception(old_model, state.trajectories)
                event = "perceive"
            elif action.type == ActionType.SELECT:
                state.selection = select_representatives(
                    state.perceptions, cfg.cluster_size,
                    keyed_rng(cfg.seed, Stream.SELECTION, iteration, slot),
                    max_iters=cfg.kmeans_iters,
                )
                event = "select"
            elif action.type == ActionType.REFINE:
                chosen = [state.trajectories[i] for i in state.selection.g1_indices]
                refine_fine_grained(old_model, chosen, state.selection.g1_indices, self.sched,
                                    self._sde_rng(iteration, slot))
                event = "refine"
            elif action.type == ActionType.SCORE:
                self._score(state)
                event = "score"
            else:
                raise ValueError(f"Unhandled action {action.type}")

            state.phase = self.phases.transition(state.phase, event)
            logger.debug(f"iter {iteration} cond {cond}: {state.phase.name}")

    # ---- optimization ---------------------------------------------------------

    def optimize(self, old_model: VelocityModel, groups: List[DualGroup], iteration: int) -> CombinedLoss:
        """``updates_per_iteration`` AdamW steps on the combined loss."""
        cfg = self.config
        loss = None
        for update in range(cfg.updates_per_iteration):
            self.optimizer.zero_grad()
            loss = combined_loss(
                self.model, old_model, groups, self.clip, cfg.timestep_fraction, self.cpgo,
                rng=keyed_rng(cfg.seed, Stream.TIMESTEPS, iteration, update),
                base=cfg.objective, ref_model=self.ref_model, beta=cfg.dpo_beta,
                ddpo_group_based=cfg.ddpo_group_based,
            )
            value = float(loss.total.detach())
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite loss {value}")
            if not loss.total.requires_grad:
                logger.warning(f"iter {iteration}: no usable transitions, update skipped")
                continue
            loss.total.backward()
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.max_grad_norm)
            self.optimizer.step()
        return loss

    def run_iteration(self, iteration: int, selection_log: Optional[NdjsonWriter] = None) -> MetricsRecord:
        cfg = self.config
        started = time.perf_counter()
        old_model = self.model.frozen_copy()
        granularity = schedule_granularity(iteration, self.schedule)

        rollouts: List[ConditionRollout] = []
        for slot, cond in enumerate(self._conditions(iteration)):
            try:
                state = self.rollout_condition(old_model, iteration, slot, cond, granularity)
            except Exception as e:
                raise FinetuneError(iteration, cond, e) from e
            rollouts.append(state)
            if selection_log is not None and state.selection is not None:
                selection_log.write(SelectionRecord(
                    iter=iteration, cond=cond, granularity=granularity.value,
                    g1_indices=state.selection.g1_indices, g2_indices=state.selection.g2_indices,
                    inertia=state.selection.inertia,
                ))

        try:
            loss = self.optimize(old_model, [r.dual_group for r in rollouts], iteration)
        except Exception as e:
            raise FinetuneError(iteration, None, e) from e
        self.last_rollouts = rollouts

        rewards = np.concatenate([np.asarray(r.g1.rewards) for r in rollouts])
        diversity = float(np.mean([
            group_diversity([t.endpoint for t in r.g1.trajectories]) if len(r.g1) > 1 else 0.0 for r in rollouts
        ]))
        consistency, eval_reward, _ = evaluate_policy(self.model, cfg, self.reward, self.probes)
        units = sum(count_step_units(r.trajectories) for r in rollouts)
        return MetricsRecord(
            iter=iteration,
            method=cfg.method,
            granularity=granularity.value,
            mean_reward=float(rewards.mean()),
            reward_std=float(rewards.std()),
            diversity=diversity,
            latent_consistency=consistency,
            eval_reward=eval_reward,
            loss_base=float(loss.base.detach()),
            loss_cpgo=float(loss.cpgo.loss.detach()),
            cpgo_eligible=loss.cpgo.eligible,
            step_units=units,
            wall_time=time.perf_counter() - started,
        )

    def run(self) -> FinetuneResult:
        cfg = self.config
        self.out_dir.mkdir(parents=True, exist_ok=True)
        records: List[MetricsRecord] = []
        with NdjsonWriter(self.out_dir / METRICS_FILE) as metrics_log, \
                NdjsonWriter(self.out_dir / SELECTIONS_FILE) as selection_log:
            for iteration in tqdm(range(cfg.iterations), desc=f"finetune[{cfg.method}]", disable=not self.progress):
                record = self.run_iteration(iteration, selection_log)
                metrics_log.write(record.to_dict(include_wall_time=cfg.log_wall_time))
                records.append(record)
                logger.info(
                    f"iter {iteration} [{record.granularity}] reward {record.mean_reward:.4f} "
                    f"eval {record.eval_reward:.4f} lat_cons {record.latent_consistency:.5f}"
                )

        if cfg.dump_trajectories:
            _, _, eval_trajs = evaluate_policy(self.model, cfg, self.reward, self.probes)
            sampled = [t for r in self.last_rollouts for t in r.trajectories]
            dump_trajectories(self.out_dir / "rollouts.ndjson", sampled)
            dump_trajectories(self.out_dir / "eval_trajectories.ndjson", eval_trajs)

        path = save_checkpoint(self.out_dir / FINETUNED_CHECKPOINT, self.model, cfg.seed,
                               extra={"method": cfg.method, "iterations": cfg.iterations})
        return FinetuneResult(model=self.model, records=records, checkpoint=path)


def build_dataset(config: ExperimentConfig):
    spec = MixtureSpec(n_modes=config.n_modes, radius=config.mixture_radius, std=config.mixture_std)
    return spec, sample_mixture(spec, config.dataset_size, keyed_rng(config.seed, Stream.DATA, 0))


def run_pretrain(config: ExperimentConfig, progress: bool = False) -> PretrainOutcome:
    """
    Flow-matching pretraining of a fresh model on the toy mixture.

    Writes the checkpoint and ``pretrain_loss.csv`` and reports the energy
    distance between ODE samples and held-out data for one condition.
    """
    spec, dataset = build_dataset(config)
    model = VelocityModel.from_arch(config.arch(), config.seed)
    result = pretrain(
        model, dataset,
        PretrainConfig(steps=config.pretrain_steps, learning_rate=config.pretrain_learning_rate,
                       batch_size=config.pretrain_batch_size),
        config.seed, progress=progress,
    )
    out = config.out_path
    write_loss_history(out / "pretrain_loss.csv", result.history)
    path = save_checkpoint(config.checkpoint_path, model, config.seed, extra={"pretrain_steps": config.pretrain_steps})

    grid = config.grid()
    n = 256
    noise = keyed_rng(config.seed, Stream.EVAL, 1 << 20).standard_normal((n, config.data_dim))
    samples = np.array([ode_sample(model, x1, grid, 0).endpoint for x1 in noise])
    held_out = sample_condition(spec, 0, n, keyed_rng(config.seed, Stream.DATA, 1))
    distance = energy_distance(samples, held_out)
    final = result.history[-1][1] if result.history else math.nan
    logger.info(f"pretrain done: final loss {final:.6f}, energy distance (cond 0) {distance:.4f}")
    return PretrainOutcome(model=model, checkpoint=path, final_loss=final, energy_distance=distance)


def load_pretrained(config: ExperimentConfig) -> VelocityModel:
    """Load the pretrained checkpoint and check it matches the configured architecture."""
    model, _ = load_checkpoint(config.checkpoint_path)
    if model.arch != config.arch():
        raise ValueError(f"checkpoint architecture {model.arch} does not match config {config.arch()}")
    return model


def run_finetune(config: ExperimentConfig, progress: bool = False) -> FinetuneResult:
    """Fine-tune the pretrained model; the DPO reference is the pretrained policy."""
    model = load_pretrained(config)
    ref_model = model.frozen_copy()
    logger.info(
        f"finetune {config.method}: objective={config.objective} schedule={config.schedule_mode} "
        f"intra_group={config.intra_group} omega={config.cpgo_weight}"
    )
    return FinetuneEngine(config, model, ref_model=ref_model, progress=progress).run()


def summarize_records(records: List[MetricsRecord]) -> Dict[str, float]:
    if not records:
        return {}
    return {
        "iterations": len(records),
        "first_mean_reward": records[0].mean_reward,
        "last_mean_reward": records[-1].mean_reward,
        "last_eval_reward": records[-1].eval_reward,
        "mean_latent_consistency": float(np.mean([r.latent_consistency for r in records])),
    }
