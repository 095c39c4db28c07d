"""
Reward Registry - factory for reward functions by kind.
"""

from typing import Dict, List, Type

from .analytic import CompositeReward, QuantizedReward, TargetDistanceReward
from .base import RewardFunction, RewardSpec


class RewardRegistry:
    """Registry mapping reward kinds to implementations."""

    _REGISTRY: Dict[str, Type[RewardFunction]] = {
        "target_distance": TargetDistanceReward,
        "quantized": QuantizedReward,
        "composite": CompositeReward,
    }

    @classmethod
    def register(cls, kind: str, reward_class: Type[RewardFunction]) -> None:
        """
        Register a new reward kind.

        Raises:
            ValueError: If the kind is taken or the class is not a RewardFunction
        """
        if kind in cls._REGISTRY:
            raise ValueError(f"Reward kind '{kind}' is already registered")
        if not issubclass(reward_class, RewardFunction):
            raise ValueError("Reward class must inherit from RewardFunction")
        cls._REGISTRY[kind] = reward_class

    @classmethod
    def unregister(cls, kind: str) -> None:
        if kind not in cls._REGISTRY:
            raise ValueError(f"Reward kind '{kind}' is not registered")
        del cls._REGISTRY[kind]

    @classmethod
    def create(cls, spec: RewardSpec) -> RewardFunction:
        """
        Build the reward a spec describes; composite parts are built recursively.

        Raises:
            ValueError: If the kind is not registered
        """
        if spec.kind not in cls._REGISTRY:
            raise ValueError(
                f"Unknown reward kind: '{spec.kind}'. "
                f"Available rewards: {', '.join(cls._REGISTRY.keys())}"
            )
        reward_class = cls._REGISTRY[spec.kind]
        if reward_class is CompositeReward:
            return CompositeReward(spec, [cls.create(c) for c in spec.components])
        return reward_class(spec)

    @classmethod
    def get_available_rewards(cls) -> List[str]:
        return list(cls._REGISTRY.keys())


def create_reward(spec: RewardSpec) -> RewardFunction:
    """Convenience wrapper around RewardRegistry.create()."""
    return RewardRegistry.create(spec)


def evaluate_reward(spec: RewardSpec, x, c: int) -> float:
    """r(x, c) for the reward ``spec`` describes."""
    return create_reward(spec).evaluate(x, c)
