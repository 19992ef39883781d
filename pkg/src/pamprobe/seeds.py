"""Pinned seed derivation.

``hash64`` folds a sequence of ints and strings into one 64-bit seed with
FNV-1a (for strings) and the splitmix64 finalizer, so any cell of an
experiment grid can be re-derived in isolation and in another language.
Random streams are numpy ``Generator(PCG64(seed))``.
"""

from __future__ import annotations

import numpy as np

PRNG_ALGORITHM = "numpy.PCG64/splitmix64-fnv1a64"

MASK64 = (1 << 64) - 1
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def splitmix64(value: int) -> int:
    z = (value + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def fnv1a64(payload: bytes) -> int:
    acc = FNV_OFFSET
    for byte in payload:
        acc ^= byte
        acc = (acc * FNV_PRIME) & MASK64
    return acc


def hash64(*parts: int | str) -> int:
    acc = 0
    for part in parts:
        if isinstance(part, str):
            value = fnv1a64(part.encode("utf-8"))
        else:
            value = int(part) & MASK64
        acc = splitmix64(acc ^ value)
    return acc


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed & MASK64))


def derived_rng(*parts: int | str) -> np.random.Generator:
    return make_rng(hash64(*parts))
