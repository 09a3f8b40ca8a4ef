"""Deterministic seed derivation.

Every randomized stage (fold shuffling, train/val splitting, augmentation,
head initialization) draws from a seed derived here, so a run is reproducible
from one master seed and workers never share RNG streams.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MOD = 2**32


def derive_seed(master_seed: int, *tags: object) -> int:
    """Stable 32-bit seed from a master seed and a tag path.

    Uses sha256 over the repr of the tag tuple, so the mapping is stable
    across processes and Python versions (unlike builtin hash()).
    """
    payload = repr((int(master_seed),) + tuple(tags)).encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "little") % _MOD


def rng_for(master_seed: int, *tags: object) -> np.random.Generator:
    """Independent numpy Generator for the given tag path."""
    return np.random.default_rng(derive_seed(master_seed, *tags))
