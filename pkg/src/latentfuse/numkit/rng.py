"""Seeded, splittable random streams.

Backed by numpy's ``SeedSequence`` spawn keys, so child streams are
statistically independent and output depends only on (seed, stream path).
"""

from __future__ import annotations

import zlib

import numpy as np

from .tensor import Tensor


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class Rng:
    """A deterministic random stream identified by ``(seed, stream path)``."""

    def __init__(self, seed: int, stream_id: int | tuple[int, ...] = 0):
        self.seed = int(seed)
        self.path = (int(stream_id),) if isinstance(stream_id, (int, np.integer)) else tuple(stream_id)
        ss = np.random.SeedSequence(entropy=self.seed & (2**64 - 1), spawn_key=self.path)
        self.gen = np.random.Generator(np.random.PCG64(ss))

    @property
    def stream_id(self) -> int:
        return self.path[-1]

    def child(self, key: int | str) -> "Rng":
        """Independent sub-stream; string keys are hashed to a stable integer."""
        k = _name_key(key) if isinstance(key, str) else int(key)
        return Rng(self.seed, self.path + (k,))

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        if std < 0:
            raise ValueError("std must be non-negative")
        return mean + std * self.gen.standard_normal(shape)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self.gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int | None = None, shape=None):
        return self.gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self.gen.choice(n, size=size, replace=replace)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"


def rng_gaussian(rng: Rng, shape, mean: float = 0.0, std: float = 1.0, requires_grad: bool = False) -> Tensor:
    """I.i.d. normal draws wrapped as a :class:`Tensor`."""
    return Tensor(rng.normal(shape, mean, std), requires_grad=requires_grad)
