"""Seeding helpers.

All randomness goes through Philox, a counter-based generator whose stream is
fully determined by its 128-bit key. Keys are derived from readable labels by
hashing, so ``make_rng("concept", 17)`` gives the same stream on every
platform and in every worker process.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_key(*labels: object) -> int:
    """Hash an ordered tuple of labels into a 128-bit integer key."""
    text = "\x1f".join(repr(label) for label in labels)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


def make_rng(*labels: object) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=derive_key(*labels)))
