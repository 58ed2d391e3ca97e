"""Deterministic fan-out of a single master seed to subsystem seeds.

Every stochastic component (partitioning, model init, client selection,
trigger pattern, generator, per-round batching) draws its own seed via
``derive_seed(master, *labels)`` so that one integer reproduces a whole
experiment while components stay decoupled from each other's draw order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master_seed: int, *labels: object) -> int:
    """Derive a stable 63-bit seed from a master seed and a label path.

    Hash-based (not stream-based), so adding a new consumer never shifts
    the seeds of existing ones.
    """
    key = repr((int(master_seed),) + tuple(str(l) for l in labels)).encode()
    digest = hashlib.blake2b(key, digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1


def rng_for(master_seed: int, *labels: object) -> np.random.Generator:
    """NumPy generator seeded from the derived seed for the label path."""
    return np.random.default_rng(derive_seed(master_seed, *labels))
