"""Deterministic RNG derivation shared by data generation and training."""

from __future__ import annotations

import zlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    raise TypeError(f"rng key must be int or str, got {type(key).__name__}")


def rng_for(*keys) -> np.random.Generator:
    """Generator seeded by a tuple of ints/strings, stable across runs.

    Strings are folded through crc32 so the stream does not depend on
    PYTHONHASHSEED. Distinct key tuples give independent streams.
    """
    if not keys:
        raise ValueError("at least one key required")
    return np.random.default_rng([_key_to_int(k) for k in keys])
