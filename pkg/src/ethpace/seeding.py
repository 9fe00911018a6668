"""Labeled derivation of random streams from a single master seed.

Every stochastic stage derives its generator as ``rng_for(master, stage, index)``
so that results are independent of scheduling and thread count.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_entropy(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def seed_sequence(master_seed: int, *labels) -> np.random.SeedSequence:
    entropy = [int(master_seed) & 0xFFFFFFFFFFFFFFFF]
    entropy.extend(_label_entropy(lab) for lab in labels)
    return np.random.SeedSequence(entropy)


def rng_for(master_seed: int, *labels) -> np.random.Generator:
    """A PCG64 generator keyed by the master seed and a label path."""
    return np.random.default_rng(seed_sequence(master_seed, *labels))
