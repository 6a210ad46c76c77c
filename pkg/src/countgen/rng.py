"""Deterministic seed derivation.

All randomness in the package flows from one master seed through named
substreams, so reruns with the same seed are bit-identical end to end.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One SplitMix64 output step; maps any 64-bit state to a well-mixed value."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, name: str) -> int:
    """Seed for a named substream (e.g. "corpus", "train", "sample", "mix")."""
    key = (master & _MASK64).to_bytes(8, "little")
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8, key=key).digest()
    return int.from_bytes(digest, "little")


def child_seed(base: int, index: int) -> int:
    """Independent per-item seed (scene i, sample i, ...) via splitmix."""
    return splitmix64((base & _MASK64) + index)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed & _MASK64))
