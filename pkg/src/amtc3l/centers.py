"""Learned class centers in embedding space."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import DTYPE, Rng

CENTER_INIT_STD = 0.1


@dataclass
class ClassCenters:
    matrix: np.ndarray  # (K, c_d)
    velocity: np.ndarray

    @property
    def k(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def copy(self) -> "ClassCenters":
        return ClassCenters(self.matrix.copy(), self.velocity.copy())


def init_centers(k: int, d: int, rng: Rng, std: float = CENTER_INIT_STD) -> ClassCenters:
    if k < 2 or d < 1:
        raise ValueError("need k >= 2 classes and d >= 1 dimensions")
    matrix = rng.normal((k, d), std=std)
    return ClassCenters(matrix, np.zeros((k, d), dtype=DTYPE))


def positive_center(centers, label: int) -> np.ndarray:
    mat = centers.matrix if isinstance(centers, ClassCenters) else np.asarray(centers)
    if not 0 <= int(label) < mat.shape[0]:
        raise IndexError(f"label {label} out of range for {mat.shape[0]} classes")
    return mat[int(label)]


def accumulate_center_grads(k: int, labels, d_positive, source, d_negative) -> np.ndarray:
    """Scatter per-sample center gradients into a ``(K, c_d)`` matrix.

    ``d_positive[i]`` belongs to row ``labels[i]``; ``d_negative[i, j]``
    belongs to row ``source[i, j]``, column ``j``. Contributions are added
    sample by sample, dimension by dimension.
    """
    d_positive = np.asarray(d_positive, dtype=DTYPE)
    m, dim = d_positive.shape
    out = np.zeros((k, dim), dtype=DTYPE)
    if m == 0:
        return out
    cols = np.broadcast_to(np.arange(dim), (m, dim))
    rows_p = np.broadcast_to(np.asarray(labels)[:, None], (m, dim))
    # interleave positive and negative terms per (i, j) so the order is
    # sample-ascending, then dimension-ascending
    rows = np.stack([rows_p, np.asarray(source)], axis=-1).reshape(-1)
    colz = np.stack([cols, cols], axis=-1).reshape(-1)
    vals = np.stack([d_positive, np.asarray(d_negative, dtype=DTYPE)], axis=-1).reshape(-1)
    np.add.at(out, (rows, colz), vals)
    return out
