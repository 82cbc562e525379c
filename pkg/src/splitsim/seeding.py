"""Named RNG substreams.

Every random draw in a run comes from a generator built here, keyed by a
seed plus an integer stream path. Replaying the same seeds replays the run
bit-for-bit; no wall-clock entropy anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Top-level stream ids (first element of the spawn key).
STREAM_DATA = 0
STREAM_INIT = 1
STREAM_PARTICIPATION = 2
STREAM_SHUFFLE = 3

# Second-level ids under STREAM_SHUFFLE.
SHUFFLE_CLIENT = 0
SHUFFLE_SERVER = 1


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent PCG64 generator for (seed, key path)."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(key))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class SeedBundle:
    """The four named seeds that determine all randomness in a run."""

    data: int
    init: int
    participation: int
    shuffle: int

    @classmethod
    def from_master(cls, seed: int) -> "SeedBundle":
        # One user-facing seed; stream separation comes from the spawn key.
        return cls(data=seed, init=seed, participation=seed, shuffle=seed)
