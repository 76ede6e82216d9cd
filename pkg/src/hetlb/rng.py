"""Seeded, splittable random streams.

Every replication gets its own ``SeedSequence`` child and, inside it, one
counter-based Philox generator per logical stream. Arrivals therefore depend
only on ``(seed, replication)``, which is what common random numbers across
policies rely on.
"""
from __future__ import annotations

import numpy as np

STREAM_NAMES = ("arrivals", "service", "policy")
BLOCK = 1 << 14


def generators(seed: int, replication: int = 0, names=STREAM_NAMES) -> dict[str, np.random.Generator]:
    root = np.random.SeedSequence(seed, spawn_key=(replication,))
    return {name: np.random.Generator(np.random.Philox(child))
            for name, child in zip(names, root.spawn(len(names)))}


class UniformBlocks:
    """Pre-drawn uniform blocks for the event kernels.

    ``bufs[k]`` is consumed from ``pos[k]`` onwards; :meth:`refill` keeps the
    unread tail and appends a fresh block, so the sequence of values seen by
    a kernel does not depend on the block size.
    """

    def __init__(self, gens: list[np.random.Generator], block: int = BLOCK):
        self.gens = gens
        self.block = block
        self.bufs = [g.random(block) for g in gens]
        self.pos = np.zeros(len(gens), dtype=np.int64)

    def refill(self, low: int = 256) -> None:
        for k, g in enumerate(self.gens):
            p = int(self.pos[k])
            if len(self.bufs[k]) - p < low:
                self.bufs[k] = np.concatenate([self.bufs[k][p:], g.random(self.block)])
                self.pos[k] = 0
