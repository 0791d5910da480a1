"""Label-splittable deterministic random streams.

A stream is keyed by a 64-bit seed plus any number of labels; the key is a
BLAKE2b digest feeding numpy's Philox counter-based generator, so streams
are reproducible across platforms and independent of the order in which
pipeline stages request them.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stream_key(seed: int, *labels) -> int:
    h = hashlib.blake2b(digest_size=16)
    h.update((int(seed) & _MASK64).to_bytes(8, "little"))
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def seeded_rng(seed: int, *labels) -> np.random.Generator:
    """Generator for ``(seed, *labels)``; same inputs give the same stream."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *labels)))


def derive_seed(seed: int, *labels) -> int:
    """A child 63-bit seed, handy for storing in manifests."""
    return stream_key(seed, *labels) & ((1 << 63) - 1)
