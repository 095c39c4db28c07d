"""
Toy conditional data: a mixture of isotropic Gaussians on a circle.

Condition c names mode c, standing in for a text prompt.
"""

from dataclasses import dataclass

import numpy as np

from .constants import DEFAULT_MIXTURE_RADIUS, DEFAULT_MIXTURE_STD, DEFAULT_N_MODES


@dataclass(frozen=True)
class MixtureSpec:
    n_modes: int = DEFAULT_N_MODES
    radius: float = DEFAULT_MIXTURE_RADIUS
    std: float = DEFAULT_MIXTURE_STD

    def modes(self) -> np.ndarray:
        """Mode centers, shape (n_modes, 2)."""
        angles = 2.0 * np.pi * np.arange(self.n_modes) / self.n_modes
        return self.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


@dataclass
class ConditionalDataset:
    x: np.ndarray
    c: np.ndarray

    def __len__(self) -> int:
        return len(self.x)


def sample_mixture(spec: MixtureSpec, n: int, rng: np.random.Generator) -> ConditionalDataset:
    """Draw n labelled samples, conditions uniform over modes."""
    if n <= 0:
        raise ValueError("dataset must be non-empty")
    c = rng.integers(0, spec.n_modes, size=n)
    x = spec.modes()[c] + spec.std * rng.standard_normal((n, 2))
    return ConditionalDataset(x=x, c=c)


def sample_condition(spec: MixtureSpec, c: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n samples from mode c only."""
    return spec.modes()[c] + spec.std * rng.standard_normal((n, 2))


def energy_distance(a: np.ndarray, b: np.ndarray) -> float:
    """
    Energy distance 2E‖X−Y‖ − E‖X−X'‖ − E‖Y−Y'‖ between two sample sets.

    Uses V-statistics (self-pairs included), so it is zero for identical sets.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("energy distance needs non-empty sample sets")

    def mean_dist(p, q):
        return float(np.mean(np.linalg.norm(p[:, None, :] - q[None, :, :], axis=-1)))

    return 2.0 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b)
