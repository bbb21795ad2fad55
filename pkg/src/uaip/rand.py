"""Deterministic RNG streams.

All randomness in the package flows through PCG64 generators built here.
``stream(seed, *keys)`` derives an independent child stream from an integer
seed plus any mix of integer and string keys; string keys are hashed with
SHA-256 so ids of any shape produce stable, platform-independent streams.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_int(key: int | str) -> int:
    if isinstance(key, bool):  # bool is an int subclass; reject to avoid surprises
        raise TypeError("stream keys must be ints or strings, not bool")
    if isinstance(key, int):
        return key
    if isinstance(key, str):
        digest = hashlib.sha256(key.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "big")
    raise TypeError(f"stream keys must be ints or strings, got {type(key).__name__}")


def stream(seed: int, *keys: int | str) -> np.random.Generator:
    """Return a PCG64 generator keyed by ``(seed, *keys)``.

    Equal arguments always yield identical streams; distinct key tuples yield
    statistically independent ones (SeedSequence mixing).
    """
    # Length word first: SeedSequence ignores trailing zero entropy words,
    # so without it (seed, k, 0) would collide with (seed, k).
    entropy = [_key_int(seed), len(keys)] + [_key_int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))
