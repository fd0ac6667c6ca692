"""Deterministic cross-platform random number generation.

All stochastic pieces of the package (synthetic volumes, dataset splits,
start positions, exploration, replay sampling, weight init) draw from the
SplitMix64 generator defined here, so equal seeds give bit-identical
streams on every platform and in every implementation of this project.

SplitMix64 update equations (64-bit unsigned, wrapping arithmetic):

    state = state + 0x9E3779B97F4A7C15
    z = state
    z = (z XOR (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z XOR (z >> 27)) * 0x94D049BB133111EB
    output = z XOR (z >> 31)

Uniform doubles take the top 53 bits: u = (output >> 11) * 2**-53, giving
values in [0, 1). Normals use the Box-Muller transform on consecutive
uniform pairs. Because the state advances by a fixed constant per draw,
whole blocks of outputs can be produced vectorized without changing the
stream.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_MASK = 0xFFFFFFFFFFFFFFFF


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


class Rng:
    """SplitMix64 stream with scalar and bulk (numpy) draws."""

    def __init__(self, seed: int):
        self._state = seed & _MASK

    def _next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK
        return _mix(self._state)

    def _next_block(self, n: int) -> np.ndarray:
        """Advance the stream by n draws, returned as uint64[n]."""
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64)
            z = np.uint64(self._state) + steps * np.uint64(_GOLDEN)
            self._state = int(z[-1]) if n else self._state
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            return z ^ (z >> np.uint64(31))

    def random(self) -> float:
        """Uniform double in [0, 1)."""
        return (self._next_u64() >> 11) * 2.0**-53

    def uniforms(self, n: int) -> np.ndarray:
        """n uniform doubles in [0, 1), identical to n random() calls."""
        return ((self._next_block(n) >> np.uint64(11)).astype(np.float64)
                * 2.0**-53)

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def normals(self, n: int) -> np.ndarray:
        """n standard normals via Box-Muller on uniform pairs."""
        m = (n + 1) // 2
        u1 = self.uniforms(m)
        u2 = self.uniforms(m)
        # Guard log(0); 2**-53 is below any value uniforms() can produce
        # except exactly 0.
        r = np.sqrt(-2.0 * np.log(np.maximum(u1, 2.0**-53)))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * m, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def randrange(self, n: int) -> int:
        """Integer in [0, n). Uses floor(u * n); bias is < 2**-53 * n."""
        if n <= 0:
            raise ValueError("randrange needs n >= 1")
        return min(int(self.random() * n), n - 1)

    def integers(self, n: int, count: int) -> np.ndarray:
        """count integers in [0, n), same stream as count randrange calls."""
        u = self.uniforms(count)
        return np.minimum((u * n).astype(np.int64), n - 1)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randrange(i + 1)
            items[i], items[j] = items[j], items[i]

    def spawn(self, key: int) -> "Rng":
        """Independent substream; deterministic in (current seed, key).

        Does not advance this generator's state.
        """
        return Rng(_mix((self._state ^ _mix(key & _MASK)) & _MASK))


def derive_seed(*parts: int) -> int:
    """Fold integers into one 64-bit seed, order-sensitive."""
    acc = 0x243F6A8885A308D3  # pi fractional bits, arbitrary non-zero start
    for p in parts:
        acc = _mix((acc + (p & _MASK)) & _MASK)
    return acc
