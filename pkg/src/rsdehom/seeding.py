"""Deterministic seed plans.

Every path index owns an independent counter-based stream: a Philox4x64
generator keyed by ``SeedSequence(master, spawn_key=(index, purpose))``.
Stream ``i`` depends only on ``(master, i)``, never on how many paths are
simulated or how they are split across workers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NOISE = 0
INITIAL = 1


@dataclass(frozen=True)
class StreamDescriptor:
    master: int
    index: int

    def generator(self, purpose: int = NOISE) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.master, spawn_key=(self.index, purpose))
        return np.random.Generator(np.random.Philox(ss))

    def noise(self) -> np.random.Generator:
        return self.generator(NOISE)

    def initial(self) -> np.random.Generator:
        return self.generator(INITIAL)


def seed_plan(master: int, n_paths: int, start: int = 0) -> list[StreamDescriptor]:
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    if master < 0:
        raise ValueError("master seed must be non-negative")
    return [StreamDescriptor(int(master), start + i) for i in range(n_paths)]


def derive_seed(master: int, *tags: int) -> int:
    """Child master seed for a labelled sub-experiment (e.g. one epsilon level)."""
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=tuple(int(t) for t in tags))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
