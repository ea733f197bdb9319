"""Keyed RNG streams.

Every random draw in the package comes from a generator derived from
``(base_seed, *keys)``, so results do not depend on call order, worker
count or thread scheduling.
"""
import hashlib

import numpy as np

_TAGS: dict[str, int] = {}


def _tag(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key)
    if key not in _TAGS:
        _TAGS[key] = int.from_bytes(hashlib.sha256(key.encode()).digest()[:4], "little")
    return _TAGS[key]


def stream(base_seed: int, *keys) -> np.random.Generator:
    """Independent generator for ``(base_seed, *keys)``; keys are ints or short strings."""
    entropy = [int(base_seed) & 0xFFFFFFFFFFFFFFFF] + [_tag(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def derive_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63 - 1))
