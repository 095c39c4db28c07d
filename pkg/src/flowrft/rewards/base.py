from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from ..constants import DEFAULT_MIXTURE_RADIUS, DEFAULT_N_MODES
from ..data import MixtureSpec


class UnknownConditionError(ValueError):
    """Raised when a reward is asked about a condition it has no target for."""
    pass


@dataclass
class RewardSpec:
    """
    Serializable description of a reward, stored in the experiment config.

    Attributes:
        kind (str): Registered reward kind ("target_distance", "quantized", "composite")
        q (float): Quantization step for the quantized reward
        n_modes (int): Number of conditions / target modes
        radius (float): Radius of the circle the targets sit on
        components (List[RewardSpec]): Parts of a composite reward
        weights (List[float]): Weights of the composite parts
    """
    kind: str = "target_distance"
    q: float = 0.5
    n_modes: int = DEFAULT_N_MODES
    radius: float = DEFAULT_MIXTURE_RADIUS
    components: List["RewardSpec"] = field(default_factory=list)
    weights: List[float] = field(default_factory=list)

    def targets(self) -> np.ndarray:
        return MixtureSpec(n_modes=self.n_modes, radius=self.radius).modes()

    def to_dict(self) -> Dict[str, Any]:
        data = {"kind": self.kind, "q": self.q, "n_modes": self.n_modes, "radius": self.radius}
        if self.components:
            data["components"] = [c.to_dict() for c in self.components]
            data["weights"] = list(self.weights)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RewardSpec":
        data = dict(data)
        comps = [cls.from_dict(c) for c in data.pop("components", [])]
        return cls(components=comps, **data)


class RewardFunction(ABC):
    """
    Abstract base class for rewards r(x, c).

    Implementations are pure: the same (x, c) always yields the same value.
    """

    def __init__(self, spec: RewardSpec):
        self.spec = spec

    def _check_condition(self, c: int) -> None:
        if not 0 <= int(c) < self.spec.n_modes:
            raise UnknownConditionError(f"unknown condition {c} (have {self.spec.n_modes})")

    @abstractmethod
    def evaluate(self, x: np.ndarray, c: int) -> float:
        """
        Score one sample.

        Args:
            x (np.ndarray): Sample
            c (int): Condition index

        Returns:
            float: Reward, higher is better
        """
        pass

    def evaluate_many(self, xs: Sequence[np.ndarray], c: int) -> np.ndarray:
        return np.array([self.evaluate(x, c) for x in xs], dtype=np.float64)

    def maximum(self) -> Optional[float]:
        """Best attainable reward, when known."""
        return None
