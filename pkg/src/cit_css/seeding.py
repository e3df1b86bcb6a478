"""Splittable deterministic seeding.

Every random draw in the package is keyed by (root seed, tag...) through a
splitmix64 chain, so any piece of work (a single sample, a task's batch
stream, a weight init) can be regenerated in isolation and in parallel with
bit-identical results. Streams are backed by the counter-based Philox
generator, which is platform-stable.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One splitmix64 scramble step (Steele et al. finalizer constants)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & _MASK64
    if isinstance(tag, str):
        digest = hashlib.sha256(tag.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    raise TypeError(f"seed tags must be int or str, got {type(tag).__name__}")


def derive_key(seed: int, *tags) -> int:
    """Fold tags into a 64-bit stream key."""
    key = splitmix64(int(seed) & _MASK64)
    for tag in tags:
        key = splitmix64(key ^ _tag_to_int(tag))
    return key


def make_rng(seed: int, *tags) -> np.random.Generator:
    """Independent numpy Generator for the (seed, tags...) stream."""
    lo = derive_key(seed, *tags)
    hi = splitmix64(lo)
    return np.random.Generator(np.random.Philox(key=(hi << 64) | lo))


def torch_seed(seed: int, *tags) -> int:
    """63-bit seed for torch generators on the same stream scheme."""
    return derive_key(seed, *tags) >> 1
