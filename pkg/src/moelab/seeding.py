"""Deterministic seed derivation.

Every generator and training job takes a single integer seed; sub-streams
(per-sample, per-run, per-expert) are derived by mixing the parent seed with
a label through splitmix64, so results never depend on execution order.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One splitmix64 scramble step (Steele et al. finalizer)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def derive_seed(seed: int, *labels: int | str) -> int:
    """Mix ``seed`` with any number of integer/string labels into a new seed.

    String labels are hashed with sha256 so namespaces like "train"/"test"
    produce disjoint streams regardless of the integer labels around them.
    """
    state = splitmix64(seed & _MASK64)
    for label in labels:
        if isinstance(label, str):
            digest = hashlib.sha256(label.encode("utf-8")).digest()
            value = int.from_bytes(digest[:8], "little")
        else:
            value = int(label) & _MASK64
        state = splitmix64(state ^ value)
    return state


def rng_for(seed: int, *labels: int | str) -> np.random.Generator:
    """A PCG64 generator seeded from the derived stream."""
    return np.random.default_rng(derive_seed(seed, *labels))
