"""Seeded random streams. Seeds may be ints or tuples of ints (sub-streams)."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def seeded_rng(seed) -> np.random.Generator:
    if isinstance(seed, (tuple, list)):
        seed = [int(s) for s in seed]
    return np.random.Generator(np.random.PCG64(seed))


def gaussian_sample(rng: np.random.Generator, dims) -> Tensor:
    return Tensor(rng.standard_normal(tuple(dims), dtype=np.float32))
