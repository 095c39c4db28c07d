"""
Group statistics used by the diagnostics: diversity, contrast, rank
correlation and perception cosine similarity. Population (divide-by-n)
statistics throughout, matching the advantage normalizer.
"""

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


@dataclass
class DiversityStats:
    cov_trace: float
    reward_std: float


def group_diversity(samples: Sequence[np.ndarray]) -> float:
    """
    Trace of the population covariance of the samples.

    Examples:
        >>> group_diversity([np.array([-1.0, 0.0]), np.array([1.0, 0.0])])
        1.0
    """
    arr = np.asarray(samples, dtype=np.float64)
    if len(arr) < 2:
        raise ValueError("diversity needs at least 2 samples")
    centered = arr - arr.mean(axis=0)
    return float((centered ** 2).sum(axis=1).mean())


def group_contrast(rewards: Sequence[float]) -> float:
    """Population standard deviation of the rewards."""
    r = np.asarray(rewards, dtype=np.float64)
    if len(r) < 2:
        raise ValueError("contrast needs at least 2 rewards")
    return float(r.std())


def diversity_stats(samples: Sequence[np.ndarray], rewards: Sequence[float]) -> DiversityStats:
    return DiversityStats(cov_trace=group_diversity(samples), reward_std=group_contrast(rewards))


def rank_correlation(a: Sequence[float], b: Sequence[float]) -> float:
    """
    Spearman correlation with average ranks for ties.

    A constant input has no defined correlation; 0 is returned.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    if len(a) < 3:
        raise ValueError("rank correlation needs at least 3 values")
    ra = rankdata(a) - (len(a) + 1) / 2.0
    rb = rankdata(b) - (len(b) + 1) / 2.0
    denom = np.sqrt((ra ** 2).sum() * (rb ** 2).sum())
    if denom == 0.0:
        return 0.0
    return float((ra * rb).sum() / denom)


def mean_cosine_similarity(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> float:
    """Mean row-wise cosine similarity of two equally long vector lists."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    num = (a * b).sum(axis=1)
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    safe = np.where(den > 0, den, 1.0)
    return float(np.mean(np.where(den > 0, num / safe, 0.0)))
