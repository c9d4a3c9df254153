"""Dense tensor helpers and the seeded random source.

Tensors are plain ``numpy`` arrays.  Forward computations run in float32 unless
a caller explicitly passes float64 arrays (gradient checks do).
"""

from __future__ import annotations

import numpy as np

FLOAT = np.float32


class DimensionError(ValueError):
    pass


def as_tensor(x, dtype=FLOAT) -> np.ndarray:
    t = np.ascontiguousarray(x, dtype=dtype)
    return t


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def relu(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t)
    return np.maximum(t, t.dtype.type(0))


def softmax_rows(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t)
    z = t - t.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class SeededRng:
    """Single-owner random source backed by the counter-based Philox generator.

    Philox output for a given seed is stable across platforms and numpy
    releases, which is what makes result files byte-reproducible.  Child
    generators for parallel or per-cell work come from :meth:`spawn`.
    """

    def __init__(self, seed: int | np.random.SeedSequence = 0):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            self._seq = np.random.SeedSequence(int(seed))
        self._gen = np.random.Generator(np.random.Philox(self._seq))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def spawn(self, n: int = 1) -> list["SeededRng"]:
        return [SeededRng(s) for s in self._seq.spawn(n)]

    def child(self, *key: int) -> "SeededRng":
        """Deterministic child keyed by integers, independent of call order."""
        entropy = self._seq.entropy
        return SeededRng(np.random.SeedSequence(entropy, spawn_key=tuple(self._seq.spawn_key) + tuple(key)))

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def uniform(self, low=0.0, high=1.0, size=None, dtype=FLOAT):
        return self._gen.random(size, dtype=np.float64).astype(dtype) * (high - low) + low


def bernoulli_mask(rng: SeededRng, shape, p: float, dtype=FLOAT) -> np.ndarray:
    """Mask of ones and zeros where each entry is zero with probability ``p``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"drop probability must lie in [0, 1), got {p}")
    if p == 0.0:
        return np.ones(shape, dtype=dtype)
    u = rng.generator.random(shape)
    return (u >= p).astype(dtype)


def gaussian_sample(rng: SeededRng, shape, dtype=FLOAT) -> np.ndarray:
    return rng.generator.standard_normal(shape).astype(dtype)
