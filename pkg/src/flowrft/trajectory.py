"""
Time grids and recorded trajectories.

Knots are stored ascending (t[0] = 0, t[T] = 1); sampling walks them
descending. Transition n goes from knot n to knot n−1, so a trajectory
that stopped at knot s holds transitions s+1..T. Per-knot arrays use NaN
rows for entries that were never recorded.

Trajectory dumps are line-delimited JSON: a header object followed by one
object per trajectory. Absent rows are written as null. Floats are written
with repr precision, so a load reproduces every array bit-exactly.
"""

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple

import numpy as np

from .constants import TRAJECTORY_FORMAT, TRAJECTORY_VERSION

logger = logging.getLogger(__name__)


class TrajectoryFormatError(ValueError):
    """Raised when a trajectory dump cannot be parsed."""
    pass


@dataclass(frozen=True)
class TimeGrid:
    """
    Shifted time grid t_n = s·u_n / (1 + (s−1)·u_n), u_n = n/T.

    Examples:
        >>> g = TimeGrid.build(4, 1.0)
        >>> g.knots.tolist()
        [0.0, 0.25, 0.5, 0.75, 1.0]
    """
    T: int
    shift: float
    knots: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def build(cls, T: int, shift: float = 3.0) -> "TimeGrid":
        if T < 1:
            raise ValueError(f"grid needs at least one step, got T={T}")
        if shift <= 0:
            raise ValueError(f"shift must be positive, got {shift}")
        u = np.arange(T + 1, dtype=np.float64) / T
        knots = shift * u / (1.0 + (shift - 1.0) * u)
        knots[0] = 0.0
        knots[-1] = 1.0
        if np.any(np.diff(knots) <= 0):
            raise ValueError("grid knots are not strictly increasing")
        knots.setflags(write=False)
        return cls(T=int(T), shift=float(shift), knots=knots)

    @classmethod
    def from_knots(cls, knots: Iterable[float], shift: float) -> "TimeGrid":
        arr = np.asarray(list(knots), dtype=np.float64)
        if arr[0] != 0.0 or arr[-1] != 1.0 or np.any(np.diff(arr) <= 0):
            raise ValueError("knots must increase strictly from 0 to 1")
        arr.setflags(write=False)
        return cls(T=len(arr) - 1, shift=float(shift), knots=arr)

    def t(self, n: int) -> float:
        return float(self.knots[n])

    def dt(self, n: int) -> float:
        """Length of transition n (knot n to knot n−1)."""
        if not 1 <= n <= self.T:
            raise IndexError(f"transition {n} outside 1..{self.T}")
        return float(self.knots[n] - self.knots[n - 1])

    def refined(self) -> "TimeGrid":
        """Grid with twice the steps and the same shift."""
        return TimeGrid.build(2 * self.T, self.shift)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TimeGrid):
            return NotImplemented
        return self.T == other.T and np.array_equal(self.knots, other.knots)

    def __hash__(self) -> int:
        return hash((self.T, self.knots.tobytes()))


def _blank(rows: int, d: int) -> np.ndarray:
    return np.full((rows, d), np.nan, dtype=np.float64)


@dataclass
class Trajectory:
    """
    One sampled path for a single condition.

    Attributes:
        cond: Condition index
        grid: Time grid the path was sampled on
        states: x at each knot, shape (T+1, d)
        velocities: v_θ_old at each knot, used by the transition leaving it
        means: transition mean μ of transition n, stored at row n
        noises: standard-normal draw z of transition n (0 on deterministic steps)
        eps: noise level ε of transition n
        stop: lowest knot reached so far
        draw_keys: keyed-RNG site of each stochastic transition
        coarse_pred: cached single-step prediction at ``coarse_knot``
    """
    cond: int
    grid: TimeGrid
    states: np.ndarray
    velocities: np.ndarray
    means: np.ndarray
    noises: np.ndarray
    eps: np.ndarray
    stop: int
    draw_keys: Dict[int, Tuple[int, ...]] = field(default_factory=dict)
    coarse_pred: Optional[np.ndarray] = None
    coarse_knot: Optional[int] = None

    @classmethod
    def start(cls, x_init: np.ndarray, grid: TimeGrid, cond: int) -> "Trajectory":
        x_init = np.asarray(x_init, dtype=np.float64)
        d = x_init.shape[-1]
        states = _blank(grid.T + 1, d)
        states[grid.T] = x_init
        return cls(
            cond=int(cond),
            grid=grid,
            states=states,
            velocities=_blank(grid.T + 1, d),
            means=_blank(grid.T + 1, d),
            noises=_blank(grid.T + 1, d),
            eps=np.full(grid.T + 1, np.nan),
            stop=grid.T,
        )

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    @property
    def is_complete(self) -> bool:
        return self.stop == 0

    @property
    def x_init(self) -> np.ndarray:
        return self.states[self.grid.T]

    @property
    def endpoint(self) -> np.ndarray:
        if not self.is_complete:
            raise ValueError(f"trajectory stopped at knot {self.stop}; no endpoint")
        return self.states[0]

    @property
    def current(self) -> np.ndarray:
        return self.states[self.stop]

    def transitions(self) -> List[int]:
        """Recorded transition indices, in sampling order."""
        return list(range(self.grid.T, self.stop, -1))

    def has_transition(self, n: int) -> bool:
        return self.stop < n <= self.grid.T

    def variance(self, n: int) -> float:
        """Per-coordinate variance ε²Δt of transition n."""
        return float(self.eps[n]) ** 2 * self.grid.dt(n)

    def stochastic_transitions(self) -> List[int]:
        return [n for n in self.transitions() if self.variance(n) > 0.0]

    def visited_knots(self) -> List[int]:
        return list(range(self.grid.T, self.stop - 1, -1))

    def copy(self) -> "Trajectory":
        return Trajectory(
            cond=self.cond,
            grid=self.grid,
            states=self.states.copy(),
            velocities=self.velocities.copy(),
            means=self.means.copy(),
            noises=self.noises.copy(),
            eps=self.eps.copy(),
            stop=self.stop,
            draw_keys=dict(self.draw_keys),
            coarse_pred=None if self.coarse_pred is None else self.coarse_pred.copy(),
            coarse_knot=self.coarse_knot,
        )

    def to_dict(self) -> Dict[str, Any]:
        def rows(arr):
            return [None if np.isnan(r).any() else [float(v) for v in r] for r in arr]

        return {
            "cond": self.cond,
            "T": self.grid.T,
            "shift": self.grid.shift,
            "knots": [float(k) for k in self.grid.knots],
            "stop": self.stop,
            "states": rows(self.states),
            "velocities": rows(self.velocities),
            "means": rows(self.means),
            "noises": rows(self.noises),
            "eps": [None if np.isnan(e) else float(e) for e in self.eps],
            "draw_keys": {str(n): list(k) for n, k in sorted(self.draw_keys.items())},
            "coarse_pred": None if self.coarse_pred is None else [float(v) for v in self.coarse_pred],
            "coarse_knot": self.coarse_knot,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Trajectory":
        try:
            grid = TimeGrid.from_knots(data["knots"], data["shift"])
            dim = len(next(r for r in data["states"] if r is not None))

            def arr(rows):
                out = _blank(grid.T + 1, dim)
                for i, r in enumerate(rows):
                    if r is not None:
                        out[i] = r
                return out

            return cls(
                cond=int(data["cond"]),
                grid=grid,
                states=arr(data["states"]),
                velocities=arr(data["velocities"]),
                means=arr(data["means"]),
                noises=arr(data["noises"]),
                eps=np.array([np.nan if e is None else e for e in data["eps"]], dtype=np.float64),
                stop=int(data["stop"]),
                draw_keys={int(n): tuple(k) for n, k in data.get("draw_keys", {}).items()},
                coarse_pred=None if data.get("coarse_pred") is None else np.asarray(data["coarse_pred"], dtype=np.float64),
                coarse_knot=data.get("coarse_knot"),
            )
        except (KeyError, StopIteration, TypeError, ValueError) as e:
            raise TrajectoryFormatError(f"malformed trajectory record: {e}") from e


def dump_trajectories(path: Path, trajectories: Iterable[Trajectory]) -> Path:
    """Atomically write trajectories as a versioned NDJSON dump."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": TRAJECTORY_FORMAT, "version": TRAJECTORY_VERSION}
    temp_path = None
    try:
        with tempfile.NamedTemporaryFile(
            mode="w", dir=path.parent, delete=False, suffix=".tmp", prefix="flowrft_", encoding="utf-8"
        ) as tf:
            temp_path = tf.name
            tf.write(json.dumps(header, sort_keys=True) + "\n")
            for traj in trajectories:
                tf.write(json.dumps(traj.to_dict(), sort_keys=True) + "\n")
        os.replace(temp_path, path)
    except Exception as e:
        if temp_path and os.path.exists(temp_path):
            os.unlink(temp_path)
        raise RuntimeError(f"Failed to save {path}: {e}")
    logger.debug(f"Wrote trajectory dump {path}")
    return path


def load_trajectories(path: Path) -> List[Trajectory]:
    """Read a dump written by ``dump_trajectories``."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        lines = [line for line in f if line.strip()]
    if not lines:
        raise TrajectoryFormatError(f"{path.name}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise TrajectoryFormatError(f"{path.name}: bad header: {e}") from e
    if header.get("format") != TRAJECTORY_FORMAT:
        raise TrajectoryFormatError(f"{path.name}: not a trajectory dump")
    if header.get("version", 0) > TRAJECTORY_VERSION:
        raise TrajectoryFormatError(f"{path.name}: unsupported version {header.get('version')}")
    out = []
    for line_num, line in enumerate(lines[1:], 2):
        try:
            out.append(Trajectory.from_dict(json.loads(line)))
        except json.JSONDecodeError as e:
            raise TrajectoryFormatError(f"{path.name}: line {line_num}: {e}") from e
    return out
