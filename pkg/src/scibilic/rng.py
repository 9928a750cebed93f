"""Seeded random streams with a documented child-derivation rule.

Every stream wraps ``numpy.random.Generator(PCG64)`` seeded from a
``numpy.random.SeedSequence``. A stream is identified by its root seed and a
path of integer keys. ``stream.child(label)`` appends ``label_key(label)`` to
the path, so the stream for ``(seed, "train", 3)`` is always the same,
regardless of what other streams were drawn from before. Distinct paths give
statistically independent generators (SeedSequence spawn-key semantics).
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["RngStream", "label_key"]


def label_key(label: int | str) -> int:
    """Map a label to a non-negative integer key.

    Integers map to themselves; strings map to the first 4 bytes of their
    SHA-256 digest (big-endian), offset by 2**32 so they never collide with
    small integer labels.
    """
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError(f"integer labels must be non-negative, got {label}")
        return int(label)
    digest = hashlib.sha256(str(label).encode("utf-8")).digest()
    return 2**32 + int.from_bytes(digest[:4], "big")


class RngStream:
    """Deterministic PCG64 stream addressed by ``(seed, *labels)``."""

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        self.generator = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.path))
        )

    def child(self, *labels: int | str) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(label_key(lab) for lab in labels))

    # thin pass-throughs so callers rarely touch the generator directly
    def random(self, size=None) -> np.ndarray:
        return self.generator.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None) -> np.ndarray:
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self.generator.integers(low, high, size)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={self.path})"
