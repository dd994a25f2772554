"""Deterministic seed derivation so parallel work never shares RNG state."""

from __future__ import annotations

import numpy as np


def derive_seed(master: int, *keys: int) -> int:
    """64-bit seed for the stream ``keys`` under ``master``."""
    ss = np.random.SeedSequence(int(master), spawn_key=tuple(int(k) for k in keys))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(lo) | (int(hi) << 32)


def rng_for(master: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(master), spawn_key=tuple(int(k) for k in keys)))


# stage stream ids, mixed into every derived seed
STREAM_SPLIT = 1
STREAM_FILL = 2
STREAM_AUGMENT = 3
STREAM_INIT = 4
STREAM_TRAIN = 5
STREAM_SAMPLE = 6
STREAM_COMPOSE = 7
