"""Deterministic RNG stream derivation.

Every stochastic routine takes a seed and derives named substreams from it,
so results are reproducible and independent of any parallel schedule.
"""

from __future__ import annotations

import numpy as np

SeedLike = "int | np.random.SeedSequence"

# Fixed tags keep substream derivation collision-free across subsystems.
TAG_TRACE = 1
TAG_PILOT_NOISE = 2
TAG_DEPLOYMENT = 3
TAG_DATASET = 4
TAG_TRAIN = 5
TAG_DOWNLINK = 6
TAG_MC = 7
TAG_RUN_NOISE = 8


def as_seedseq(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(int(seed))


def substream(seed, *key: int) -> np.random.SeedSequence:
    """Derive a child SeedSequence identified by an integer key path."""
    base = as_seedseq(seed)
    entropy = base.entropy if base.entropy is not None else 0
    return np.random.SeedSequence(entropy, spawn_key=base.spawn_key + tuple(int(k) for k in key))


def rng_for(seed, *key: int) -> np.random.Generator:
    return np.random.default_rng(substream(seed, *key))


def complex_normal(rng: np.random.Generator, shape, var: float = 1.0) -> np.ndarray:
    """Circularly symmetric complex Gaussian draws with the given variance."""
    scale = np.sqrt(var / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
