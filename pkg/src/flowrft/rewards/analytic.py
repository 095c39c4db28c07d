"""
Closed-form toy rewards.

The quantized reward is deliberately piecewise constant: it reproduces the
flat-then-jump response surfaces that push fine-tuned models toward
over-optimized samples.
"""

import math

import numpy as np

from .base import RewardFunction, RewardSpec


class TargetDistanceReward(RewardFunction):
    """r(x, c) = −‖x − m_c‖."""

    def evaluate(self, x: np.ndarray, c: int) -> float:
        self._check_condition(c)
        return -float(np.linalg.norm(np.asarray(x, dtype=np.float64) - self.spec.targets()[int(c)]))

    def maximum(self) -> float:
        return 0.0


class QuantizedReward(RewardFunction):
    """r(x, c) = q·floor(−‖x − m_c‖ / q)."""

    def __init__(self, spec: RewardSpec):
        super().__init__(spec)
        if not spec.q > 0:
            raise ValueError(f"quantization step must be positive, got {spec.q}")

    def evaluate(self, x: np.ndarray, c: int) -> float:
        self._check_condition(c)
        dist = float(np.linalg.norm(np.asarray(x, dtype=np.float64) - self.spec.targets()[int(c)]))
        return self.spec.q * math.floor(-dist / self.spec.q)

    def maximum(self) -> float:
        return 0.0


class CompositeReward(RewardFunction):
    """Weighted sum of component rewards."""

    def __init__(self, spec: RewardSpec, parts):
        super().__init__(spec)
        if len(parts) != len(spec.weights) or not parts:
            raise ValueError("composite reward needs one weight per component")
        self.parts = list(parts)

    def evaluate(self, x: np.ndarray, c: int) -> float:
        self._check_condition(c)
        return float(sum(w * p.evaluate(x, c) for w, p in zip(self.spec.weights, self.parts)))
