"""Named, counter-based random streams.

Every consumer of randomness asks for a stream by name. Streams are Philox
generators keyed by ``(seed, crc32(name))``, so drawing from one stream never
shifts the values seen by another. Inside the ``"state"`` stream the normal
deviate for sweep ``s`` and node ``i`` is element ``(s, i)`` of one long
row-major sequence; chunked draws therefore give the same path as a single
draw.
"""

from __future__ import annotations

import zlib

import numpy as np

MAX_SEED = 2**64 - 1


def stream(seed: int, name: str) -> np.random.Generator:
    """Return the generator for stream ``name`` under a 64-bit ``seed``."""
    seed = int(seed)
    if not 0 <= seed <= MAX_SEED:
        raise ValueError(f"seed must be in [0, 2**64), got {seed}")
    key = zlib.crc32(name.encode("utf-8"))
    ss = np.random.SeedSequence(seed, spawn_key=(key,))
    return np.random.Generator(np.random.Philox(ss))


class NoiseBlocks:
    """Hand out rows of standard normals from the ``"state"`` stream.

    Rows are produced in fixed-size chunks; the values do not depend on the
    chunk size.
    """

    def __init__(self, seed: int, width: int, chunk: int = 4096, name: str = "state"):
        self._gen = stream(seed, name)
        self.width = width
        self.chunk = chunk

    def take(self, rows: int) -> np.ndarray:
        return self._gen.standard_normal((rows, self.width))

    def __iter__(self):
        while True:
            yield from self.take(self.chunk)
