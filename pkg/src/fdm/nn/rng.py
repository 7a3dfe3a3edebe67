"""Counter-based random streams.

Every draw site in the pipeline owns an RngStream identified by
(seed, stream id). Each call derives a fresh Philox key from
(seed, stream, counter) with a splitmix64 hash, so a stream's output is a
pure function of its state tuple and distinct stream ids are independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import Tensor, active_dtype

_MASK = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _derive_key(seed: int, stream: int, counter: int) -> list[int]:
    a = _splitmix64(seed & _MASK)
    b = _splitmix64(a ^ (stream & _MASK))
    c = _splitmix64(b ^ (counter & _MASK))
    d = _splitmix64(c)
    return [c, d]


@dataclass
class RngStream:
    """Resumable random stream; state is exactly (seed, stream, counter)."""

    seed: int
    stream: int = 0
    counter: int = 0

    def child(self, stream: int) -> "RngStream":
        return RngStream(self.seed, stream, 0)

    def _generator(self) -> np.random.Generator:
        key = _derive_key(self.seed, self.stream, self.counter)
        return np.random.Generator(np.random.Philox(key=key))

    def gaussian(self, shape) -> np.ndarray:
        """Standard-normal array; advances the counter by one block."""
        g = self._generator()
        self.counter += 1
        out = g.standard_normal(size=shape, dtype=np.float32)
        dt = active_dtype()
        return out if dt == np.float32 else out.astype(dt)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        g = self._generator()
        self.counter += 1
        out = g.random(size=shape, dtype=np.float32) * (high - low) + low
        dt = active_dtype()
        return out if dt == np.float32 else out.astype(dt)

    def integers(self, low: int, high: int, shape) -> np.ndarray:
        """Uniform ints in [low, high] inclusive."""
        g = self._generator()
        self.counter += 1
        return g.integers(low, high, size=shape, endpoint=True)

    def permutation(self, n: int) -> np.ndarray:
        g = self._generator()
        self.counter += 1
        return g.permutation(n)


def rng_gaussian(stream: RngStream, shape) -> Tensor:
    """Tensor of standard-normal draws; deterministic per stream state."""
    return Tensor(stream.gaussian(shape))
