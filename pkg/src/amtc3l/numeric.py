"""Elementary numeric kernels and seeded randomness.

Everything is float64. Batched operations act on the trailing axis so the
same function serves a single vector and an ``(m, n)`` stack.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DTYPE = np.float64


def sigmoid(x):
    """Logistic function, evaluated without overflow for any finite input."""
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def sigmoid_grad_from_output(s):
    return s * (1.0 - s)


def softmax(v):
    """Softmax over the last axis with max-subtraction."""
    v = np.asarray(v, dtype=DTYPE)
    if v.shape[-1] < 2:
        raise ValueError("softmax needs at least two entries")
    z = v - v.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def argmax_lowest(v):
    """Row-wise argmax; numpy already returns the first maximal index."""
    return np.argmax(np.asarray(v), axis=-1)


@dataclass(frozen=True)
class Tensor3:
    """A ``channels x rows x cols`` block stored flat in C order."""

    channels: int
    rows: int
    cols: int
    data: np.ndarray

    def __post_init__(self):
        for name in ("channels", "rows", "cols"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        data = np.ascontiguousarray(self.data, dtype=DTYPE).reshape(-1)
        if data.size != self.channels * self.rows * self.cols:
            raise ValueError(
                f"data length {data.size} != {self.channels}*{self.rows}*{self.cols}"
            )
        if not np.all(np.isfinite(data)):
            raise ValueError("Tensor3 entries must be finite")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, a) -> "Tensor3":
        a = np.asarray(a, dtype=DTYPE)
        if a.ndim != 3:
            raise ValueError(f"expected a 3-d array, got shape {a.shape}")
        return cls(a.shape[0], a.shape[1], a.shape[2], a)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.rows, self.cols)

    def array(self) -> np.ndarray:
        return self.data.reshape(self.shape)


class Rng:
    """Seeded counter-based generator (Philox) that can be split into
    independent child streams by integer key.

    Children are derived from the seed and the key path only, so the stream a
    component sees does not depend on how many draws other components made.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")
        self.seed = int(seed)
        self.key = tuple(_key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def split(self, key: int) -> "Rng":
        return Rng(self.seed, self.key + (int(key),))

    def normal(self, size=None, std: float = 1.0) -> np.ndarray:
        if std < 0:
            raise ValueError("std must be nonnegative")
        return std * self._gen.standard_normal(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def bytes(self, n: int) -> bytes:
        return self._gen.bytes(n)


def gaussian(rng: Rng, mean: float, std: float) -> float:
    """One draw from N(mean, std**2). A draw is consumed even when std is 0."""
    if std < 0:
        raise ValueError("std must be nonnegative")
    z = float(rng.normal())
    if std == 0:
        return float(mean)
    return float(mean + std * z)
