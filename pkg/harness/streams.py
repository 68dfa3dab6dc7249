"""Counter-derived random streams.

A stream is a pure function of (seed, index, purpose tag): there is no
sequential state shared between trials or blocks, so any partition of the
work over threads draws exactly the same numbers.
"""
import zlib

import numpy as np


def _tag_key(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def stream_for(seed: int, trial_index: int, purpose_tag: str) -> np.random.Generator:
    """Independent generator for (seed, trial_index, purpose_tag)."""
    if seed < 0 or trial_index < 0:
        raise ValueError(f"seed and trial_index must be non-negative, got {seed}, {trial_index}")
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(trial_index, _tag_key(purpose_tag)))
    return np.random.Generator(np.random.Philox(ss))


def block_starts(n_trials: int, block_size: int) -> list:
    """First trial index of each block covering [0, n_trials)."""
    if block_size < 1:
        raise ValueError(f"block_size must be >= 1, got {block_size}")
    return list(range(0, n_trials, block_size))
