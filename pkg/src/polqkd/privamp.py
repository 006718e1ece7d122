"""Privacy amplification by binary Toeplitz hashing.

The matrix is ``T[i, j] = seed[i - j + n - 1]`` for an ``n``-bit input and
``l``-bit output, so ``T @ key`` is a slice of the full convolution of the
seed with the key, reduced mod 2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft

# inputs up to this many bits are convolved exactly in integers
_DIRECT_LIMIT = 4096


@dataclass(frozen=True)
class ToeplitzSeed:
    bits: np.ndarray
    prng_seed: int = 0
    counter: int = 0

    @classmethod
    def from_prng(cls, prng_seed: int, counter: int, n: int, l: int) -> "ToeplitzSeed":
        """Reproducible seed of ``n + l - 1`` bits for stream ``(prng_seed, counter)``."""
        rng = np.random.default_rng([prng_seed, counter])
        bits = rng.integers(0, 2, max(n + l - 1, 0), dtype=np.uint8)
        return cls(bits=bits, prng_seed=prng_seed, counter=counter)


def naive_toeplitz_hash(key, seed_bits, l: int) -> np.ndarray:
    """Reference O(n*l) evaluation over GF(2)."""
    key = np.asarray(key, dtype=np.uint8)
    seed_bits = np.asarray(seed_bits, dtype=np.uint8)
    n = len(key)
    out = np.zeros(l, dtype=np.uint8)
    for i in range(l):
        acc = 0
        for j in range(n):
            acc ^= int(seed_bits[i - j + n - 1]) & int(key[j])
        out[i] = acc
    return out


def toeplitz_hash(key, seed: ToeplitzSeed, l: int) -> np.ndarray:
    """Hash an ``n``-bit key to ``l`` bits; bit-exact with :func:`naive_toeplitz_hash`."""
    key = np.asarray(key, dtype=np.uint8)
    n = len(key)
    if l < 0 or l > n:
        raise ValueError(f"output length {l} must lie in [0, {n}]")
    if len(seed.bits) != n + l - 1 and l > 0:
        raise ValueError(f"seed has {len(seed.bits)} bits, expected {n + l - 1}")
    if l == 0:
        return np.zeros(0, dtype=np.uint8)
    s = seed.bits.astype(np.int64)
    k = key.astype(np.int64)
    if n <= _DIRECT_LIMIT:
        full = np.convolve(s, k)
    else:
        # counts stay far below 2**52, so rounding the float result is exact
        size = sfft.next_fast_len(len(s) + n - 1, real=True)
        full = sfft.irfft(sfft.rfft(s.astype(np.float64), size) * sfft.rfft(k.astype(np.float64), size), size)
        full = np.rint(full).astype(np.int64)
    return (full[n - 1 : n - 1 + l] & 1).astype(np.uint8)


def pa_round(alice_key, bob_key, l: int, prng_seed: int, counter: int = 0):
    """One in-process amplification round; returns ``(alice_secret, bob_secret, seed)``.

    Alice draws the seed and would send it in the clear; both sides hash.
    """
    n = len(alice_key)
    if len(bob_key) != n:
        raise ValueError("keys must have equal length")
    seed = ToeplitzSeed.from_prng(prng_seed, counter, n, l)
    return toeplitz_hash(alice_key, seed, l), toeplitz_hash(bob_key, seed, l), seed
