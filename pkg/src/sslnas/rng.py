"""Deterministic random-stream derivation.

Every stochastic choice in the engine draws from a generator keyed by a
seed plus a tuple of string/int tags (phase name, epoch, sample index, ...).
Streams are pure functions of their key, so results are independent of
worker count, call order, and platform, and resuming a run only needs the
integer counters that make up the keys.
"""

from __future__ import annotations

import hashlib

import numpy as np


def seeded_rng(*keys: int | str) -> np.random.Generator:
    """Return a PCG64 generator keyed by ``keys``.

    Keys must be ints or strings; floats are rejected because their string
    form is not stable enough to serve as a stream identity.
    """
    parts = []
    for k in keys:
        if isinstance(k, bool) or not isinstance(k, (int, str)):
            raise TypeError(f"rng keys must be int or str, got {type(k).__name__}")
        parts.append(str(k))
    digest = hashlib.sha256("\x1f".join(parts).encode("utf-8")).digest()
    entropy = int.from_bytes(digest, "little")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
