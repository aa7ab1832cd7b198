"""Counter-based random streams.

Built on numpy's Philox bit generator: the stream identity is the 128-bit
key (seed, stream) and the position within the stream is Philox's internal
counter, so draws are deterministic per (seed, stream, draw index) and
independent streams can be handed to parallel workers without coordination.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["SeedStream", "stream_id"]


def stream_id(name: str) -> int:
    """Stable 64-bit stream id for a human-readable site name."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class SeedStream:
    """One independent random stream, identified by (seed, stream)."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, name: str) -> "SeedStream":
        """Derive an independent stream for a named site.

        The child key mixes this stream's identity with the site name, so
        distinct sites (or the same site at different steps, by encoding the
        step in the name) never share a counter sequence.
        """
        mixed = stream_id(f"{self.seed}/{self.stream}/{name}")
        return SeedStream(self.seed, mixed)

    def normal(self, shape=(), dtype=np.float32) -> np.ndarray:
        return self._gen.standard_normal(size=shape, dtype=np.float64).astype(dtype)

    def uniform(self, low: float, high: float, shape=(), dtype=np.float32) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(dtype)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), in random order."""
        return self._gen.permutation(n)[:k]
