"""Deterministic random stream derivation.

Every source of randomness in this package is a Philox generator keyed by
(master seed, stream label, indices...). Streams derived from the same key
are identical across runs, platforms and thread counts, which is what makes
whole experiments byte-reproducible: parallel work only ever splits indices
across workers, never shares a sequential generator.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(seed: int, label: str, *indices: int) -> int:
    """Derive a 128-bit Philox key from a seed, a label and optional indices."""
    text = f"{seed}/{label}/" + "/".join(str(i) for i in indices)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=16).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, label: str, *indices: int) -> np.random.Generator:
    """A fresh, independent generator for the given (seed, label, indices)."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, label, *indices)))
