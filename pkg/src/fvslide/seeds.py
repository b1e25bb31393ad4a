"""Splittable seeding.

Every random decision in the pipeline flows from one root seed through
`child_seed`, so each stage (and each slide within a stage) gets an
independent, reproducible stream. Streams use the counter-based Philox
generator; derivation hashes the tag path, so adding or reordering slides
never shifts another slide's stream.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def child_seed(root: int, *tags: int | str) -> int:
    """Derive a 64-bit seed for the stream named by `tags` under `root`."""
    h = hashlib.blake2s(digest_size=8)
    h.update(str(int(root) & _MASK64).encode())
    for tag in tags:
        h.update(b"/")
        h.update(str(tag).encode())
    return int.from_bytes(h.digest(), "little")


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed) & _MASK64)))
