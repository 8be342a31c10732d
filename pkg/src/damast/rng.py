"""Deterministic random streams.

Every random draw in the package flows from a single root seed. Independent
streams are derived by hashing a stream name (and optional integer keys) into
a ``SeedSequence``, so adding draws to one stream never perturbs another.
Python's builtin ``hash`` is salted per process and must not be used here.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _digest(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


def stream(root_seed: int, name: str, *keys: int) -> np.random.Generator:
    """Generator for the stream ``name`` (plus integer subkeys) under ``root_seed``."""
    entropy = [root_seed & 0xFFFFFFFFFFFFFFFF, _digest(name)]
    entropy.extend(int(k) & 0xFFFFFFFFFFFFFFFF for k in keys)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def keyed_unit_vector(dim: int, name: str, *keys: int) -> np.ndarray:
    """Unit vector drawn from a counter-based generator keyed by (name, keys).

    Uses Philox so the vector is a pure function of the key: no generator
    state is shared with any other stream.
    """
    lo = _digest(name)
    hi = 0
    for k in keys:
        hi = (hi * 0x100000001B3 + (int(k) & 0xFFFFFFFFFFFFFFFF)) & 0xFFFFFFFFFFFFFFFF
    gen = np.random.Generator(np.random.Philox(key=np.array([lo, hi], dtype=np.uint64)))
    v = gen.standard_normal(dim)
    n = np.linalg.norm(v)
    while n == 0.0:  # astronomically unlikely; regenerate rather than divide by zero
        v = gen.standard_normal(dim)
        n = np.linalg.norm(v)
    return v / n


def child_seed(root_seed: int, name: str, *keys: int) -> int:
    """64-bit seed for a named child of ``root_seed``, stable across runs."""
    return int(stream(root_seed, name, *keys).integers(0, 2**63))
