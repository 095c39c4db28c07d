"""
Reward functions and group statistics for flowrft.

Exports the reward interface, the analytic toy rewards and the registry.
"""

from .base import RewardFunction, RewardSpec, UnknownConditionError
from .analytic import CompositeReward, QuantizedReward, TargetDistanceReward
from .registry import RewardRegistry, create_reward, evaluate_reward
from .diagnostics import (
    DiversityStats,
    diversity_stats,
    group_contrast,
    group_diversity,
    mean_cosine_similarity,
    rank_correlation,
)

# ============================================================================
# EXPORTS
# ============================================================================

__all__ = [
    'RewardFunction',
    'RewardSpec',
    'UnknownConditionError',
    'TargetDistanceReward',
    'QuantizedReward',
    'CompositeReward',
    'RewardRegistry',
    'create_reward',
    'evaluate_reward',
    'DiversityStats',
    'diversity_stats',
    'group_contrast',
    'group_diversity',
    'mean_cosine_similarity',
    'rank_correlation',
]
