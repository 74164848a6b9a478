"""Named random streams fanned out from one global seed.

A stream is ``default_rng(SeedSequence([seed, H(purpose), *ids]))`` where
``H`` is the first 8 bytes (little-endian) of the BLAKE2b digest of the
purpose string. Streams with different purposes or ids are independent, and
the mapping is stable across processes and platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np


def purpose_key(purpose: str) -> int:
    return int.from_bytes(hashlib.blake2b(purpose.encode("utf-8"), digest_size=8).digest(), "little")


def stream(seed: int, purpose: str, *ids: int) -> np.random.Generator:
    if seed < 0 or any(i < 0 for i in ids):
        raise ValueError("seeds and stream ids must be non-negative")
    return np.random.default_rng(np.random.SeedSequence([int(seed), purpose_key(purpose), *map(int, ids)]))
