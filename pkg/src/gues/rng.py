"""Seeded randomness utilities.

Every stochastic piece of the package (noise injections, weight
initialization, shuffles, perturbation starts) draws from generators
derived here, so a run is fully determined by its integer seeds.  Normal
deviates come from the Box-Muller transform over seeded uniforms rather
than the library's ziggurat sampler; the produced byte stream is pinned
by this module alone and stays stable across numpy versions that keep
PCG64 stable.
"""

from __future__ import annotations

import numpy as np


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Uniform generator for the derivation path (seed, *keys).

    Distinct key paths give statistically independent streams, so
    components can be re-seeded individually without coupling their
    draws to iteration order elsewhere.
    """
    path = [int(seed)] + [int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(path)))


def uniform(gen: np.random.Generator, low: float, high: float, shape) -> np.ndarray:
    """Uniform draw on [low, high) as float64."""
    return low + (high - low) * gen.random(shape)


class BoxMuller:
    """Standard normal deviates via the Box-Muller transform.

    u1 is mapped to (0, 1] so log(u1) is always finite.  Each call draws
    whole pairs and discards an unused spare, so the deviate sequence for
    a given generator depends only on the sequence of requested sizes.
    """

    def __init__(self, gen: np.random.Generator):
        self._gen = gen

    def normal(self, shape=()) -> np.ndarray:
        if isinstance(shape, (int, np.integer)):
            shape = (int(shape),)
        else:
            shape = tuple(int(s) for s in shape)
        n = 1
        for s in shape:
            n *= s
        if n == 0:
            return np.zeros(shape, dtype=np.float64)
        pairs = (n + 1) // 2
        u1 = 1.0 - self._gen.random(pairs)   # (0, 1]
        u2 = self._gen.random(pairs)         # [0, 1)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = radius * np.cos(angle)
        out[1::2] = radius * np.sin(angle)
        return out[:n].reshape(shape)


def normal_stream(seed: int, *keys: int) -> BoxMuller:
    """Box-Muller source over the derived substream for (seed, *keys)."""
    return BoxMuller(substream(seed, *keys))
