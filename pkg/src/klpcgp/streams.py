"""Deterministic RNG substreams.

Every stochastic stage derives its generator from (seed, stage tag, ...path)
so reruns with the same seed are bit-identical and no two stages share a
stream.  Tags are small integers reserved here.
"""

import numpy as np

SIMULATE = 1   # (seed, SIMULATE, design_index, attempt_index)
PROJECT = 2    # (seed, PROJECT, design_index)
GP = 3         # (seed, GP)
SAMPLE = 4     # (seed, SAMPLE, ...)
COMPARE = 5    # (seed, COMPARE, theta_index, attempt_index)
THETA = 6      # (seed, THETA)


def substream(seed, *path):
    """A fresh Generator for the given (seed, path) address."""
    return np.random.default_rng(
        np.random.SeedSequence([int(seed)] + [int(p) for p in path]))
