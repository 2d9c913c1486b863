"""Named, independent random streams derived from one run seed."""

from __future__ import annotations

import zlib

import numpy as np


def purpose_key(*purpose: str | int) -> tuple[int, ...]:
    return tuple(p if isinstance(p, int) else zlib.crc32(p.encode()) for p in purpose)


def substream(seed: int, *purpose: str | int) -> np.random.Generator:
    """A generator that depends only on ``seed`` and the purpose path.

    Adding draws to one purpose never shifts the values another purpose sees.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=purpose_key(*purpose))))


def derived_seed(seed: int, *purpose: str | int) -> int:
    """A 32-bit integer seed for a sub-task, stable across runs."""
    return int(np.random.SeedSequence(seed, spawn_key=purpose_key(*purpose)).generate_state(1)[0])
