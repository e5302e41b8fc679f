"""Counter-based random streams.

Every draw is addressed by ``(seed, purpose, counter, stream_id)``: a Philox generator
keyed by ``(seed, purpose)`` is positioned at ``counter`` and produces one block of
variates, of which stream ``i`` takes entry ``i``. A particle therefore sees the same
noise no matter which scheme, backend or worker consumes it.
"""
from __future__ import annotations

import numpy as np

INIT = 0
PARTICLE_NOISE = 1
LOCALVOL_INIT = 2
LOCALVOL_NOISE = 3
REPETITION = 4


def _key(seed: int, purpose: int) -> np.ndarray:
    return np.random.SeedSequence([int(seed), int(purpose)]).generate_state(2, dtype=np.uint64)


def generator(seed: int, purpose: int, counter: int = 0) -> np.random.Generator:
    bitgen = np.random.Philox(key=_key(seed, purpose), counter=np.array([0, counter, 0, 0], dtype=np.uint64))
    return np.random.Generator(bitgen)


def normal_block(seed: int, purpose: int, counter: int, size: int) -> np.ndarray:
    return generator(seed, purpose, counter).standard_normal(size)


def uniform_block(seed: int, purpose: int, counter: int, size: int) -> np.ndarray:
    return generator(seed, purpose, counter).random(size)


def child_seed(seed: int, *path: int) -> int:
    """Deterministic 63-bit seed for a named sub-run (e.g. ladder rung, repetition)."""
    state = np.random.SeedSequence([int(seed), REPETITION, *map(int, path)]).generate_state(1, dtype=np.uint64)
    return int(state[0] >> np.uint64(1))
