"""
Seeded random streams

Every stochastic component draws from its own numpy Generator, derived from
the experiment seed and a stream name, so adding draws to one component never
shifts the numbers another component sees.
"""

import hashlib
from typing import Dict, Iterable

import numpy as np


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.md5(name.encode()).digest()[:8], "little")


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for (seed, name)"""
    return np.random.default_rng(np.random.SeedSequence([int(seed), _name_key(name)]))


def streams(seed: int, names: Iterable[str]) -> Dict[str, np.random.Generator]:
    return {name: stream(seed, name) for name in names}
