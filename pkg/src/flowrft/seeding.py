"""
Keyed counter-based random streams.

Every random draw in a run comes from a Philox generator keyed by the run
seed plus a tuple naming the draw (stream, iteration, condition, trajectory,
step). Draws never depend on the order in which trajectories are sampled.
"""

from enum import IntEnum
from typing import Iterable

import numpy as np


class Stream(IntEnum):
    """Purposes that own disjoint key spaces."""
    INIT_NOISE = 1
    SDE = 2
    SELECTION = 3
    TIMESTEPS = 4
    CONDITIONS = 5
    EVAL = 6
    PRETRAIN = 7
    DATA = 8
    PROBE = 9


def keyed_rng(seed: int, stream: Stream, *key: int) -> np.random.Generator:
    """
    Build an independent generator for one keyed draw site.

    Args:
        seed: Run seed
        stream: Purpose of the draw
        *key: Non-negative integers identifying the draw site

    Returns:
        A fresh ``numpy.random.Generator`` backed by Philox
    """
    spawn_key = (int(stream),) + tuple(int(k) for k in key)
    if any(k < 0 for k in spawn_key):
        raise ValueError(f"key components must be non-negative, got {spawn_key}")
    ss = np.random.SeedSequence(int(seed), spawn_key=spawn_key)
    return np.random.Generator(np.random.Philox(ss))


class KeyedRNG:
    """
    A seed plus key prefix, handed to code that needs to derive further keys.

    ``child(...)`` extends the prefix; ``generator(...)`` materializes a draw
    site. Two KeyedRNG objects with equal seed and prefix produce identical
    streams.
    """

    def __init__(self, seed: int, stream: Stream, prefix: Iterable[int] = ()):
        self.seed = int(seed)
        self.stream = stream
        self.prefix = tuple(int(p) for p in prefix)

    def child(self, *key: int) -> "KeyedRNG":
        return KeyedRNG(self.seed, self.stream, self.prefix + tuple(int(k) for k in key))

    def with_stream(self, stream: Stream) -> "KeyedRNG":
        return KeyedRNG(self.seed, stream, self.prefix)

    def generator(self, *key: int) -> np.random.Generator:
        return keyed_rng(self.seed, self.stream, *(self.prefix + tuple(int(k) for k in key)))

    def key(self, *key: int) -> tuple:
        """Full key tuple of a draw site, as recorded in trajectory dumps."""
        return (self.seed, int(self.stream)) + self.prefix + tuple(int(k) for k in key)

    def __repr__(self) -> str:
        return f"KeyedRNG(seed={self.seed}, stream={self.stream.name}, prefix={self.prefix})"
