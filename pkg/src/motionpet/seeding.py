import zlib

import numpy as np


def substream(seed: int, tag: str) -> np.random.SeedSequence:
    """Independent, reproducible seed sequence for one stage of one subject."""
    return np.random.SeedSequence([int(seed), zlib.crc32(tag.encode())])


def child_seeds(master_seed: int, n: int) -> list[int]:
    return [int(c.generate_state(1, np.uint64)[0]) for c in spawn(master_seed, n)]


def as_seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(int(seed))


def spawn(seed, n: int) -> list[np.random.SeedSequence]:
    """Children of ``seed`` without mutating it (``SeedSequence.spawn`` is stateful)."""
    ss = as_seed_sequence(seed)
    return [np.random.SeedSequence(ss.entropy, spawn_key=ss.spawn_key + (i,), pool_size=ss.pool_size)
            for i in range(n)]
