"""Named, seedable counter-based random streams.

Each stream is a Philox generator keyed by the run seed and a path of names or
integers, so a stream's draws depend only on ``(seed, path)`` and never on
how many other streams were used before it.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part: str | int) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


class RngStreams:
    """Factory of independent named generators for one seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def stream(self, *path: str | int) -> np.random.Generator:
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=tuple(_key(p) for p in path))
        return np.random.Generator(np.random.Philox(sequence))

    def child(self, *path: str | int) -> "RngStreams":
        """A derived factory whose streams are namespaced under ``path``."""
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=tuple(_key(p) for p in path))
        return RngStreams(int(sequence.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1)))

    def __repr__(self) -> str:
        return f"RngStreams(seed={self.seed})"


def stream(seed: int, *path: str | int) -> np.random.Generator:
    return RngStreams(seed).stream(*path)
