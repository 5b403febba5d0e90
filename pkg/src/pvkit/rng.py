"""Portable counter-based random generator (splitmix64).

Every stochastic operation in the toolkit draws from this generator so that
results are bit-reproducible across platforms and reimplementations. The
update rule is the standard splitmix64 mix:

    state_i   = seed + (i + 1) * 0x9E3779B97F4A7C15   (mod 2**64)
    z         = state_i
    z         = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9  (mod 2**64)
    z         = (z ^ (z >> 27)) * 0x94D049BB133111EB  (mod 2**64)
    output_i  = z ^ (z >> 31)

Doubles in [0, 1) take the top 53 bits: u_i = (output_i >> 11) * 2**-53.
The counter form (draw i is a pure function of seed and i) lets callers
vectorise and lets a pixel's fate depend only on its position, not on how
many other pixels were drawn before it.
"""

from __future__ import annotations

import numpy as np

GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)
MIX_MUL_1 = np.uint64(0xBF58476D1CE4E5B9)
MIX_MUL_2 = np.uint64(0x94D049BB133111EB)

_U64_ERRSTATE = {"over": "ignore"}


def splitmix64(seed: int, indices: np.ndarray) -> np.ndarray:
    """Return the raw 64-bit outputs for draw positions `indices`.

    `indices` may be any integer array; draw i corresponds to the (i+1)-th
    state of a splitmix64 stream seeded with `seed`.
    """
    idx = np.asarray(indices, dtype=np.uint64)
    with np.errstate(**_U64_ERRSTATE):
        z = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + (idx + np.uint64(1)) * GOLDEN_GAMMA
        z = (z ^ (z >> np.uint64(30))) * MIX_MUL_1
        z = (z ^ (z >> np.uint64(27))) * MIX_MUL_2
        z = z ^ (z >> np.uint64(31))
    return z


def uniform01(seed: int, count: int) -> np.ndarray:
    """Doubles in [0, 1) for draws 0..count-1 of the stream `seed`."""
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    bits = splitmix64(seed, np.arange(count, dtype=np.uint64))
    return (bits >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


def hash_color(value: int) -> tuple[int, int, int]:
    """Deterministic RGB color for integer ids (overlay rendering)."""
    z = int(splitmix64(0x70766B6974, np.array([value], dtype=np.uint64))[0])
    # avoid near-black so ids stay visible against the void background
    return (64 + (z & 0xBF), 64 + ((z >> 8) & 0xBF), 64 + ((z >> 16) & 0xBF))
