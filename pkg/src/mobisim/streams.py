"""Deterministic RNG stream derivation.

Every stochastic component draws from a stream derived from (base seed, tags).
Streams are independent of each other and of call order, so per-agent work can
be parallelized or reordered without changing results.

Never use Python's built-in hash() here: it is salted per process for str.
"""

from __future__ import annotations

import hashlib
import random


def derive_seed(base_seed: int, *tags: object) -> int:
    """Mix a base seed and a tag path into a stable 64-bit stream seed."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(base_seed)).encode("utf-8"))
    for tag in tags:
        h.update(b"/")
        h.update(str(tag).encode("utf-8"))
    return int.from_bytes(h.digest(), "big")


def derive_rng(base_seed: int, *tags: object) -> random.Random:
    """Independent random.Random stream for (base_seed, tags)."""
    return random.Random(derive_seed(base_seed, *tags))
