"""Deterministic RNG streams derived from a single 64-bit seed."""

from __future__ import annotations

import numpy as np

# Stream tags keep independent consumers (init, scenes, prompts, eval)
# from sharing random state.
STREAM_INIT = 0
STREAM_SCENE = 1
STREAM_PROMPT = 2
STREAM_EVAL = 3


def subrng(seed: int, *key: int) -> np.random.Generator:
    """A generator keyed by (seed, *key); identical keys give identical streams."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(k) & 0xFFFFFFFFFFFFFFFF for k in key]
    return np.random.default_rng(np.random.SeedSequence(entropy))
