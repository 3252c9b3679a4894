"""Flush+Reload receiver: probe array, noisy reload timing, byte decoding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .machine import LINE_SIZE, Cache

PROBE_SLOTS = 256


class EmptySamples(ValueError):
    pass


class DegenerateCalibration(ValueError):
    """Hit and miss latencies overlap after trimming."""


@dataclass(frozen=True)
class ProbeArray:
    base: int
    stride: int = 4096

    def __post_init__(self):
        if self.stride < LINE_SIZE:
            raise ValueError(f"probe stride {self.stride} below the {LINE_SIZE}-byte line size")
        if self.base % LINE_SIZE:
            raise ValueError("probe base must be line aligned")

    def slot(self, i: int) -> int:
        return self.base + (i & 0xFF) * self.stride

    def index_of(self, addr: int) -> Optional[int]:
        """Slot whose line contains ``addr``, if any."""
        off = addr - self.base
        if off < 0:
            return None
        i, within = divmod(off, self.stride)
        if i < PROBE_SLOTS and within < LINE_SIZE:
            return i
        return None

    @property
    def span(self) -> int:
        return PROBE_SLOTS * self.stride

    def cached_slots(self, cache: Cache):
        # walk the (small) set of cached lines rather than all 256 slots
        return [i for i in map(self.index_of, cache.cached_lines()) if i is not None]

    def cached_mask(self, cache: Cache) -> np.ndarray:
        mask = np.zeros(PROBE_SLOTS, dtype=bool)
        mask[self.cached_slots(cache)] = True
        return mask

    def flush(self, cache: Cache) -> None:
        for i in self.cached_slots(cache):
            cache.flush(self.slot(i))


class TimingOracle:
    """Reload latency source: Gaussian around the hit or miss mean, floored at 1."""

    def __init__(self, hit_mean: float = 40.0, miss_mean: float = 300.0,
                 noise_sigma: float = 20.0, seed=None):
        if noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        self.hit_mean = float(hit_mean)
        self.miss_mean = float(miss_mean)
        self.noise_sigma = float(noise_sigma)
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def sample(self, cached: np.ndarray) -> np.ndarray:
        """One latency per element of the boolean ``cached`` array (any shape)."""
        means = np.where(cached, self.hit_mean, self.miss_mean)
        noise = self.rng.standard_normal(means.shape) * self.noise_sigma
        return np.maximum(means + noise, 1.0)

    def hit_samples(self, n: int) -> np.ndarray:
        return self.sample(np.ones(n, dtype=bool))

    def miss_samples(self, n: int) -> np.ndarray:
        return self.sample(np.zeros(n, dtype=bool))


def measure_reload(array: ProbeArray, cache: Cache, oracle: TimingOracle) -> np.ndarray:
    """Time a reload of all 256 probe slots. The cache itself is left untouched."""
    return oracle.sample(array.cached_mask(cache))


def calibrate_threshold(hit_samples, miss_samples, trim: float = 0.01) -> float:
    """Midpoint between the trimmed hit maximum and the trimmed miss minimum."""
    hits = np.sort(np.asarray(hit_samples, dtype=float))
    misses = np.sort(np.asarray(miss_samples, dtype=float))
    if hits.size == 0 or misses.size == 0:
        raise EmptySamples("calibration needs both hit and miss samples")
    hit_max = hits[hits.size - 1 - int(hits.size * trim)]
    miss_min = misses[int(misses.size * trim)]
    if hit_max >= miss_min:
        raise DegenerateCalibration(
            f"trimmed hit max {hit_max:.1f} >= trimmed miss min {miss_min:.1f}")
    return (hit_max + miss_min) / 2


class Decoded(NamedTuple):
    value: Optional[int]
    ambiguous: bool = False


def decode_byte(latencies, threshold: float) -> Decoded:
    lat = np.asarray(latencies)
    below = np.flatnonzero(lat < threshold)
    if below.size == 0:
        return Decoded(None)
    if below.size == 1:
        return Decoded(int(below[0]))
    return Decoded(int(below[np.argmin(lat[below])]), True)


def calibrated_oracle_threshold(oracle: TimingOracle, n: int = 1000) -> float:
    return calibrate_threshold(oracle.hit_samples(n), oracle.miss_samples(n))
