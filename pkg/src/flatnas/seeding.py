"""Named random sub-streams derived from a single root seed."""

from __future__ import annotations

import hashlib

import numpy as np


def stable_hash(*keys: object) -> int:
    """63-bit hash of ``keys`` that is stable across processes and platforms."""
    h = hashlib.blake2b(digest_size=8)
    for key in keys:
        h.update(repr(key).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little") >> 1


def derive_seed(root: int, *keys: object) -> int:
    if not keys:
        return int(root)
    return int(root) ^ stable_hash(*keys)


def substream(root: int, *keys: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *keys))
