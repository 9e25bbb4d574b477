"""Seeded, splittable random streams (Philox counter-based generator)."""

from __future__ import annotations

import numpy as np


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream for ``seed``; extra integer ``keys`` select a substream."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def spawn(seed: int, n: int) -> list:
    return [make_rng(seed, i) for i in range(n)]
