"""Named random streams split from a single root seed.

Each component draws from its own stream so toggling one component (say,
augmentation) never shifts the draws seen by another (say, the sampler).
"""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("init", "sampler", "augment", "split", "synth", "select", "probe")


def stream_seed(seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(name.encode("utf-8")),))


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(stream_seed(seed, name)))


def get_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def set_state(rng: np.random.Generator, state: dict) -> None:
    rng.bit_generator.state = state
