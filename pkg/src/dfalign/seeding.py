"""Seed derivation: every random stream is ``sha256(f"{seed}/{name}/{index}...")``.

Keeping the derivation in one place means any component's randomness can be
reproduced from the top-level seed alone, independent of execution order.
"""

import hashlib

import numpy as np


def derive_seed(seed: int, *path) -> int:
    key = "/".join([str(int(seed))] + [str(p) for p in path])
    return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "little")


def rng_for(seed: int, *path) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *path))
