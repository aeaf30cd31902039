"""Seeded random streams.

Every source of randomness in a run is derived from one master seed through a
named substream, so that changing e.g. the dropout draws never perturbs the
batch order.
"""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("init", "shuffle", "shuffle_id", "dropout", "folds", "synth")


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Return an independent PCG64 generator for ``(seed, name, *extra)``."""
    key = (zlib.crc32(name.encode("utf-8")),) + tuple(int(e) for e in extra)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))


def generator_state(gen: np.random.Generator) -> dict:
    return gen.bit_generator.state


def restore_generator(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)
