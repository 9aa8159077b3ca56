"""Seeded, splittable random streams.

All randomness in mnprobit flows through ``numpy.random.Generator`` objects built
from an explicit integer seed; independent substreams are spawned through
``SeedSequence`` so sharded work stays reproducible.
"""

from typing import List, Union

import numpy as np

from .errors import MnprobitValidationError

RngLike = Union[int, np.random.SeedSequence, np.random.Generator]


def make_rng(seed: RngLike) -> np.random.Generator:
    """Build a generator from a seed, a seed sequence, or pass a generator through."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, bool) or seed is None:
        raise MnprobitValidationError("An explicit integer seed is required")
    return np.random.default_rng(seed)


def child_sequences(seed: Union[int, np.random.SeedSequence], count: int) -> List[np.random.SeedSequence]:
    """Spawn ``count`` children from a copy of ``seed``; the caller's sequence is left untouched."""
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer, np.random.SeedSequence)):
        raise MnprobitValidationError("An explicit integer seed or SeedSequence is required")
    if isinstance(seed, np.random.SeedSequence):
        root = np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key, pool_size=seed.pool_size)
    else:
        root = np.random.SeedSequence(seed)
    return list(root.spawn(count))


def spawn(seed: RngLike, count: int) -> List[np.random.Generator]:
    """Create ``count`` independent child generators.

    Integer seeds and seed sequences always yield the same children. A generator
    is stateful, so spawning from it twice gives different children.
    """
    if isinstance(seed, np.random.Generator):
        return list(seed.spawn(count))
    return [np.random.default_rng(child) for child in child_sequences(seed, count)]
