"""
k-means with k-means++ seeding, deterministic for a given generator.

Assignment ties go to the lowest center index. A center that loses all its
points keeps its previous position.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .constants import DEFAULT_KMEANS_ITERS

logger = logging.getLogger(__name__)


class ClusteringError(ValueError):
    pass


@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    inertia: float
    iterations: int
    converged: bool


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def kmeans_plusplus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """D²-weighted seeding; never picks an already chosen point twice."""
    n = len(points)
    chosen = [int(rng.integers(0, n))]
    for _ in range(1, k):
        dist_sq = _sq_dists(points, points[chosen]).min(axis=1)
        dist_sq[chosen] = 0.0
        total = dist_sq.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=dist_sq / total))
        else:
            # duplicates only: fall back to a uniform pick among unused points
            unused = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(unused))
        chosen.append(nxt)
    return points[chosen].copy()


def kmeans(points, k: int, rng: np.random.Generator, max_iters: int = DEFAULT_KMEANS_ITERS) -> KMeansResult:
    """
    Lloyd iterations from k-means++ seeds.

    Raises:
        ClusteringError: if k is not in 1..len(points)
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    n = len(points)
    if not 1 <= k <= n:
        raise ClusteringError(f"cannot form {k} clusters from {n} points")

    centers = kmeans_plusplus_init(points, k, rng)
    labels = np.full(n, -1, dtype=np.int64)
    converged = False
    iterations = 0
    for iterations in range(1, max_iters + 1):
        new_labels = np.argmin(_sq_dists(points, centers), axis=1)
        if np.array_equal(new_labels, labels):
            converged = True
            break
        labels = new_labels
        for j in range(k):
            mask = labels == j
            if np.any(mask):
                centers[j] = points[mask].mean(axis=0)

    inertia = float(_sq_dists(points, centers)[np.arange(n), labels].sum())
    logger.debug(f"kmeans k={k}: {iterations} iterations, inertia {inertia:.6g}")
    return KMeansResult(centers=centers, labels=labels, inertia=inertia, iterations=iterations, converged=converged)
