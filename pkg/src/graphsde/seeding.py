"""Named RNG substreams derived from one master seed."""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``name``; stable across runs and Python versions."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(name.encode()),))
    return np.random.Generator(np.random.PCG64(ss))


def split(rng: np.random.Generator, k: int) -> list[np.random.Generator]:
    return list(rng.spawn(k))


class ZeroNoise:
    """Stand-in generator whose normal draws are all zero.

    Running an affine scheme with it yields the exact mean trajectory.
    """

    def standard_normal(self, size=None):
        return np.zeros(size if size is not None else ())

    def spawn(self, k: int):
        return [ZeroNoise() for _ in range(k)]
