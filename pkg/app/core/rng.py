from typing import Union

import numpy as np

SeedLike = Union[None, int, np.random.Generator, np.random.SeedSequence]


def as_generator(seed: SeedLike) -> np.random.Generator:
    """Accept an int seed, a SeedSequence or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def spawn(seed: int, *key: int) -> np.random.Generator:
    """Independent stream derived from a master seed by a counter key."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


def child_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63 - 1))
