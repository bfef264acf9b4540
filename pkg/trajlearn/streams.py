"""
Per-shot random streams.

Every shot owns a Philox (counter-based, 64-bit output) generator keyed by a
splitmix64 mix of the master seed and the shot index, so generated data does not
depend on execution order or worker count. Gaussians are produced by Box-Muller
over the stream's uniforms.
"""

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, index: int) -> int:
    """64-bit seed for stream ``index`` under ``master``."""
    return splitmix64(splitmix64(master & MASK64) ^ (index & MASK64))


def stream(master: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=derive_seed(master, index)))


def unit_interval(master: int, index: int) -> float:
    """Deterministic hash of (master, index) mapped to [0, 1)."""
    return derive_seed(master, index) / float(1 << 64)


def box_muller(gen: np.random.Generator, n: int) -> np.ndarray:
    """``n`` standard normal draws from ``gen``."""
    half = (n + 1) // 2
    u1 = gen.random(half)
    u2 = gen.random(half)
    radius = np.sqrt(-2.0 * np.log1p(-u1))
    angle = 2.0 * np.pi * u2
    return np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:n]
