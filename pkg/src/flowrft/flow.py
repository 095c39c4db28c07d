"""
Flow-matching core: interpolation, the pretraining loss, Euler ODE sampling
and single-step clean-sample prediction.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch
from tqdm import tqdm

from .data import ConditionalDataset
from .model import DTYPE, VelocityModel
from .seeding import Stream, keyed_rng
from .trajectory import TimeGrid, Trajectory

logger = logging.getLogger(__name__)


class EmptyBatchError(ValueError):
    """Raised when a loss is asked to reduce over zero samples."""
    pass


class DivergenceError(RuntimeError):
    """Raised when training produces a non-finite loss."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss


def interpolate(x0, x1, t):
    """
    Straight-line interpolant (1−t)·x0 + t·x1.

    Works on numpy arrays and torch tensors alike.

    Examples:
        >>> interpolate(np.array([0., 0.]), np.array([2., 2.]), 0.5).tolist()
        [1.0, 1.0]
    """
    return (1.0 - t) * x0 + t * x1


def target_velocity(x0, x1):
    """Velocity of the interpolant, x1 − x0."""
    return x1 - x0


@dataclass
class PretrainBatch:
    """Pairs (x0 data, x1 noise) with times and conditions."""
    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        self.x0 = np.atleast_2d(np.asarray(self.x0, dtype=np.float64))
        self.x1 = np.atleast_2d(np.asarray(self.x1, dtype=np.float64))
        self.t = np.atleast_1d(np.asarray(self.t, dtype=np.float64))
        self.c = np.atleast_1d(np.asarray(self.c, dtype=np.int64))
        n = len(self.x0)
        if not (len(self.x1) == len(self.t) == len(self.c) == n):
            raise ValueError(
                f"batch fields differ in length: x0={n}, x1={len(self.x1)}, t={len(self.t)}, c={len(self.c)}"
            )

    def __len__(self) -> int:
        return len(self.t)

    @classmethod
    def draw(cls, dataset: ConditionalDataset, size: int, rng: np.random.Generator) -> "PretrainBatch":
        idx = rng.integers(0, len(dataset), size=size)
        x0 = dataset.x[idx]
        return cls(x0=x0, x1=rng.standard_normal(x0.shape), t=rng.random(size), c=dataset.c[idx])


def fm_loss(model: VelocityModel, batch: PretrainBatch) -> torch.Tensor:
    """
    Mean over the batch of ‖v_θ(x_t, t, c) − (x1 − x0)‖².

    Returns a scalar tensor attached to the model's graph.

    Raises:
        EmptyBatchError: if the batch holds no pairs
    """
    if len(batch) == 0:
        raise EmptyBatchError("empty batch")
    x0 = torch.from_numpy(batch.x0)
    x1 = torch.from_numpy(batch.x1)
    t = torch.from_numpy(batch.t)
    c = torch.from_numpy(batch.c)
    xt = interpolate(x0, x1, t[:, None])
    residual = model(xt, t, c) - target_velocity(x0, x1)
    return (residual ** 2).sum(dim=1).mean()


def single_step_predict(model: VelocityModel, x: np.ndarray, t: float, c: int) -> np.ndarray:
    """
    One-step Euler estimate of the clean sample, x − t·v_θ(x, t, c).

    At t = 0 the input is returned unchanged without evaluating the model.
    """
    x = np.asarray(x, dtype=np.float64)
    if t == 0.0:
        return x.copy()
    return x - t * model.velocity(x, t, c)


def predict_clean(model: VelocityModel, x: torch.Tensor, t: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    """Batched, differentiable form of single_step_predict."""
    return x - t[:, None] * model(x, t, c)


def ode_sample(model: VelocityModel, x1: np.ndarray, grid: TimeGrid, c: int) -> Trajectory:
    """
    Deterministic Euler solve from t=1 to t=0.

    Each step is x_next = x + (t_next − t)·v_θ(x, t, c). Velocities and
    transition means are recorded; noise draws are zero.
    """
    traj = Trajectory.start(x1, grid, c)
    x = traj.x_init.copy()
    for n in range(grid.T, 0, -1):
        t, t_next = grid.t(n), grid.t(n - 1)
        v = model.velocity(x, t, c)
        x = x + (t_next - t) * v
        traj.velocities[n] = v
        traj.means[n] = x
        traj.noises[n] = 0.0
        traj.eps[n] = 0.0
        traj.states[n - 1] = x
        traj.stop = n - 1
    return traj


@dataclass
class PretrainConfig:
    steps: int = 5000
    learning_rate: float = 1e-3
    batch_size: int = 256
    log_every: int = 500


@dataclass
class PretrainResult:
    model: VelocityModel
    history: List[Tuple[int, float]] = field(default_factory=list)

    def smoothed(self, alpha: float = 0.05) -> List[float]:
        """Exponential moving average of the loss history."""
        out, ema = [], None
        for _, loss in self.history:
            ema = loss if ema is None else (1.0 - alpha) * ema + alpha * loss
            out.append(ema)
        return out


def pretrain(
    model: VelocityModel,
    dataset: ConditionalDataset,
    config: PretrainConfig,
    seed: int,
    progress: bool = False,
) -> PretrainResult:
    """
    Minimize fm_loss with Adam on batches drawn from ``dataset``.

    Batches are keyed by (seed, step), so the final parameters depend only on
    the seed, the dataset and the config.

    Raises:
        ValueError: if the dataset is empty
        DivergenceError: on a non-finite loss
    """
    if len(dataset) == 0:
        raise ValueError("dataset must be non-empty")
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    result = PretrainResult(model=model)

    model.train()
    for step in tqdm(range(config.steps), desc="pretrain", disable=not progress):
        batch = PretrainBatch.draw(dataset, config.batch_size, keyed_rng(seed, Stream.PRETRAIN, step))
        optimizer.zero_grad()
        loss = fm_loss(model, batch)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise DivergenceError(step, value)
        loss.backward()
        optimizer.step()
        result.history.append((step, value))
        if config.log_every and step % config.log_every == 0:
            logger.info(f"pretrain step {step}: loss {value:.6f}")
    model.eval()
    return result


def write_loss_history(path: Path, history: List[Tuple[int, float]]) -> None:
    """Write ``step,loss`` lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for step, loss in history:
            f.write(f"{step},{loss!r}\n")


def lipschitz_probe(
    model: VelocityModel,
    grid: TimeGrid,
    n_pairs: int,
    rng: np.random.Generator,
    n_conditions: Optional[int] = None,
    scale: float = 1.0,
) -> float:
    """
    Largest observed ‖π(x,t) − π(y,t)‖ / ‖x − y‖ over random nearby pairs.

    Pairs are drawn at random interior knots with x ~ N(0, I) and y a small
    perturbation of x.
    """
    n_conditions = n_conditions or model.arch.n_conditions
    worst = 0.0
    for _ in range(n_pairs):
        n = int(rng.integers(1, grid.T + 1))
        c = int(rng.integers(0, n_conditions))
        x = rng.standard_normal(model.data_dim)
        y = x + scale * 1e-2 * rng.standard_normal(model.data_dim)
        t = grid.t(n)
        gap = np.linalg.norm(single_step_predict(model, x, t, c) - single_step_predict(model, y, t, c))
        worst = max(worst, float(gap / np.linalg.norm(x - y)))
    return worst
