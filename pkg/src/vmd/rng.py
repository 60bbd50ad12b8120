"""Named random streams fanned out from one master seed.

Each purpose (init of a given parameter, data shuffling, epsilon draws of one
branch) gets its own generator, so switching a loss term on or off never
shifts the draws seen by an unrelated part of the run.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


def get_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def set_state(rng: np.random.Generator, state: dict) -> None:
    rng.bit_generator.state = state
