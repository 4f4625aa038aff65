"""Shared RNG plumbing: deterministic counter-keyed streams."""

from __future__ import annotations

import numpy as np

# Stream tags keep independent uses of the same user seed apart.
TAG_FIXTURE = 1
TAG_TRUE_CMSE = 2
TAG_EVAL = 3
TAG_BOOTSTRAP = 4


def rng_stream(seed: int, *key: int) -> np.random.Generator:
    """Generator for (seed, *key); identical inputs give identical streams."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in key]])
    return np.random.Generator(np.random.PCG64(ss))
