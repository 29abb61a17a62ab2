"""Reproducible Gaussian increments keyed by (seed, stream_id).

Backed by NumPy's counter-based Philox generator: the 128-bit key is derived
from (seed, stream_id, tag) and the counter starts at zero, so a stream's
content never depends on how trajectories are scheduled across workers.
"""

from __future__ import annotations

import numpy as np

# stream namespaces; keep distinct so different uses never share a sequence
TAG_TRAJECTORY = 0
TAG_REDUCED = 1
TAG_EQUILIBRIUM = 2
TAG_CONSTRAINED = 3
TAG_AUX = 4


class NoiseStream:
    """Source of standard normal draws for one trajectory.

    ``counter`` counts the normals handed out so far.
    """

    def __init__(self, seed: int, stream_id: int = 0, tag: int = TAG_TRAJECTORY):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self.tag = int(tag)
        if self.seed < 0 or self.stream_id < 0:
            raise ValueError("seed and stream_id must be non-negative")
        key = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, self.tag, self.stream_id]).generate_state(
            2, np.uint64
        )
        self._gen = np.random.Generator(np.random.Philox(key=key))
        self.counter = 0

    def normals(self, shape):
        out = self._gen.standard_normal(shape)
        self.counter += out.size
        return out

    def uniform(self, shape):
        out = self._gen.random(shape)
        self.counter += out.size
        return out

    def __repr__(self):
        return f"NoiseStream(seed={self.seed}, stream_id={self.stream_id}, tag={self.tag}, counter={self.counter})"
