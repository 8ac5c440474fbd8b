"""Seeded, per-purpose random streams.

Each purpose (weight init, dropout masks, data shuffling, ...) gets its own
PCG64 generator derived from the run seed, so adding draws to one stream never
perturbs another.
"""

from __future__ import annotations

import numpy as np

STREAMS = {"init": 0, "dropout": 1, "shuffle": 2, "sampling": 3, "probe": 4, "data": 5}


def stream(seed: int, purpose: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), STREAMS[purpose]])))


def get_state(gen: np.random.Generator) -> dict:
    return gen.bit_generator.state


def set_state(gen: np.random.Generator, state: dict) -> None:
    gen.bit_generator.state = state
