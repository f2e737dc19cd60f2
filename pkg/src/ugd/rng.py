"""Seed derivation helpers.

Every random draw in the package goes through a generator keyed by a master
seed plus a tuple of integer (or string) labels, so that independent pieces of
work get independent, reproducible streams regardless of evaluation order.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode("utf-8"))


def derive_rng(seed: int, *labels) -> np.random.Generator:
    """Return a Philox generator for the stream ``(seed, *labels)``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key(lab) for lab in labels]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *labels) -> int:
    """A 63-bit integer seed for the stream ``(seed, *labels)``."""
    return int(derive_rng(seed, *labels).integers(0, 2**63 - 1))
