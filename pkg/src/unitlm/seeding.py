"""Seed derivation and global seeding."""

from __future__ import annotations

import random

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *keys: int) -> int:
    """Child seed for ``keys`` under ``seed``; a fixed chain of splitmix64 steps.

    ``derive_seed(s, i)`` is the per-utterance seed of utterance ``i`` in a corpus
    generated with seed ``s``. Results fit in 63 bits so they are valid numpy and
    torch seeds.
    """
    h = splitmix64(int(seed) & _MASK64)
    for k in keys:
        h = splitmix64(h ^ (int(k) & _MASK64))
    return h >> 1


def rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys))


def seed_everything(seed: int) -> None:
    import torch

    random.seed(seed)
    np.random.seed(seed % (1 << 32))
    torch.manual_seed(seed)
