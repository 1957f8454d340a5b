"""
Counter-based random substreams

Every random draw in the lab comes from a generator keyed by
(master seed, purpose, indices...), so results do not depend on the order in
which environments or workers are scheduled.
"""

import hashlib

import numpy as np


def _purpose_key(purpose: str) -> int:
    digest = hashlib.sha256(purpose.encode('utf-8')).digest()
    return int.from_bytes(digest[:4], 'little')


def substream(seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """
    Create an independent generator for one (purpose, indices) tuple

    Args:
        seed: Master seed of the run
        purpose: Short label such as 'init', 'collect' or 'fit'
        *indices: Non-negative integers (iteration, environment, step, ...)

    Returns:
        numpy Generator seeded from the derived key
    """
    key = (_purpose_key(purpose),) + tuple(int(i) for i in indices)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))
