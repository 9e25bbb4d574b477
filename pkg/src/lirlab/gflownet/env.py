"""HyperGrid: states {0..H-1}^d, start at the origin, increment one coordinate or terminate."""

from dataclasses import dataclass, field
import math

import numpy as np

ORIGINAL, COSINE, XOR, COPRIME = "original", "cosine", "xor", "coprime"
VARIANTS = (ORIGINAL, COSINE, XOR, COPRIME)
_ALIASES = {"original": ORIGINAL, "cosine": COSINE, "xor": XOR, "bitwisexor": XOR,
            "coprime": COPRIME, "multiplicativecoprime": COPRIME}

MAX_ENUMERABLE = 10 ** 7


@dataclass(frozen=True)
class HyperGrid:
    d: int
    H: int

    def __post_init__(self):
        if self.d < 1 or self.H < 2:
            raise ValueError("HyperGrid needs d >= 1 and H >= 2")

    @property
    def n_states(self) -> int:
        return self.H ** self.d

    @property
    def n_actions(self) -> int:
        """d increments plus terminate (the last action)."""
        return self.d + 1

    @property
    def stop(self) -> int:
        return self.d

    def coords(self) -> np.ndarray:
        """(n_states, d) coordinates in flat (C) order."""
        if self.n_states > MAX_ENUMERABLE:
            raise ValueError(f"H^d = {self.n_states} exceeds {MAX_ENUMERABLE}")
        return np.stack(np.unravel_index(np.arange(self.n_states), (self.H,) * self.d), axis=1)

    def index(self, s) -> np.ndarray:
        s = np.asarray(s)
        return np.ravel_multi_index(tuple(np.moveaxis(s, -1, 0)), (self.H,) * self.d)

    def strides(self) -> np.ndarray:
        """Flat-index offset of incrementing each coordinate."""
        return np.array([self.H ** (self.d - 1 - i) for i in range(self.d)])

    def action_mask(self) -> np.ndarray:
        """(n_states, d+1) valid actions; terminate is always valid."""
        c = self.coords()
        return np.concatenate([c < self.H - 1, np.ones((len(c), 1), dtype=bool)], axis=1)

    def n_parents(self) -> np.ndarray:
        return (self.coords() > 0).sum(axis=1)


@dataclass(frozen=True)
class RewardSpec:
    variant: str = ORIGINAL
    r0: float = 0.1
    r1: float = 0.5
    r2: float = 2.0
    closeness: float = 0.8
    weights: tuple = (1.0, 10.0, 100.0)
    bit_ranges: tuple = ((0, 5), (0, 7), (0, 9))
    primes: tuple = (2, 3, 5)
    caps: tuple = (2, 2, 2)
    floor: float = 1e-6

    def __post_init__(self):
        v = _ALIASES.get(str(self.variant).lower())
        if v is None:
            raise ValueError(f"unknown reward variant {self.variant!r}; expected one of {VARIANTS}")
        object.__setattr__(self, "variant", v)
        if not self.floor > 0:
            raise ValueError("reward floor must be positive")
        if len(self.weights) != len(self.bit_ranges) or len(self.weights) != len(self.caps):
            raise ValueError("one weight per tier is required")


def _normal_pdf(z):
    return np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)


def cosine_factor(a):
    return (np.cos(50 * a) + 1) * _normal_pdf(5 * a)


def _factors_over(values, primes, cap):
    """True where the value is a product of the primes with every exponent <= cap (0 excluded)."""
    v = np.asarray(values).copy()
    ok = v > 0
    for p in primes:
        for _ in range(cap):
            div = ok & (v % p == 0)
            v = np.where(div, v // p, v)
    return ok & (v == 1)


def raw_reward(spec: RewardSpec, grid: HyperGrid, states) -> np.ndarray:
    """Reward before flooring for an (..., d) array of states."""
    s = np.asarray(states)
    a = np.abs(s / (grid.H - 1) - 0.5)
    if spec.variant == ORIGINAL:
        outer = np.all(a > 0.25, axis=-1)
        inner = np.all((a > 0.3) & (a < 0.4), axis=-1)
        return spec.r0 + spec.r1 * outer + spec.r2 * inner
    if spec.variant == COSINE:
        return spec.r0 + spec.r1 * np.prod(cosine_factor(a), axis=-1)
    if spec.variant == XOR:
        parity = np.bitwise_xor.reduce(s.astype(np.int64), axis=-1)
        r = np.zeros(s.shape[:-1])
        alive = np.ones(s.shape[:-1], dtype=bool)
        for w, (lo, hi) in zip(spec.weights, spec.bit_ranges):
            mask = sum(1 << b for b in range(lo, hi + 1))
            alive &= (parity & mask) == 0
            r = r + w * alive
        return r
    r = np.zeros(s.shape[:-1])
    alive = np.ones(s.shape[:-1], dtype=bool)
    for w, cap in zip(spec.weights, spec.caps):
        alive &= np.all(_factors_over(s, spec.primes, cap), axis=-1)
        r = r + w * alive
    return r


def reward(spec: RewardSpec, grid: HyperGrid, states) -> np.ndarray:
    """Floored reward R + floor, used in every log-domain quantity."""
    return raw_reward(spec, grid, states) + spec.floor


def cosine_fmax(grid: HyperGrid) -> float:
    a = np.abs(np.arange(grid.H) / (grid.H - 1) - 0.5)
    return float(cosine_factor(a).max())


def mode_mask(spec: RewardSpec, grid: HyperGrid, states=None) -> np.ndarray:
    s = grid.coords() if states is None else np.asarray(states)
    r = raw_reward(spec, grid, s)
    if spec.variant == ORIGINAL:
        top = spec.r0 + spec.r1 + spec.r2
    elif spec.variant == COSINE:
        top = spec.r0 + spec.r1 * (spec.closeness * cosine_fmax(grid)) ** grid.d
    else:
        top = float(sum(spec.weights))
    return r >= top * (1 - 1e-12)


def enumerate_modes(spec: RewardSpec, d: int, H: int):
    """(count, (n_modes, d) array of mode states) by brute force."""
    grid = HyperGrid(d, H)
    c = grid.coords()
    m = mode_mask(spec, grid, c)
    return int(m.sum()), c[m]
