"""Deterministic random-stream derivation.

Every stochastic operation draws from a generator derived from the root seed
plus a tuple of integer coordinates (stage, layer, sweep, op, atom, ...).
Re-running with the same seed therefore reproduces every sample bit-exactly,
including after a checkpoint resume, because no draw depends on a shared
sequential stream.
"""

from __future__ import annotations

import numpy as np

# Stage tags (first coordinate of every stream).
STAGE_INIT = 0
STAGE_PRETRAIN = 1
STAGE_REFINE = 2
STAGE_TEST = 3
STAGE_GENERATE = 4

# Op tags (used as one coordinate inside a sweep).
OP_INDICATORS = 0
OP_WEIGHTS = 1
OP_DICT = 2
OP_THETA = 3
OP_PREC = 4
OP_PI = 5
OP_IMPUTE = 6


def stream(seed: int, *coords: int) -> np.random.Generator:
    """Generator for the given coordinate tuple under the root seed."""
    key = tuple(int(c) & 0xFFFFFFFF for c in coords)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


class StreamFactory:
    """Binds a root seed and a fixed coordinate prefix (e.g. stage, layer)."""

    def __init__(self, seed: int, *prefix: int):
        self.seed = int(seed)
        self.prefix = tuple(int(p) for p in prefix)

    def stream(self, *coords: int) -> np.random.Generator:
        return stream(self.seed, *self.prefix, *coords)

    def child(self, *extra: int) -> "StreamFactory":
        return StreamFactory(self.seed, *self.prefix, *extra)
