"""Negative-sample selection strategies.

* ``ms_nss`` synthesizes a negative per dimension from the closest rival
  center element in sigmoid-squashed space.
* ``ns_nss`` uses the model's prediction: the predicted class when wrong,
  otherwise the class that has most often beaten this one this epoch.
* ``mm_nss`` uses the prediction when wrong and synthesis when right.

All ties break toward the lowest class index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import sigmoid

MODES = ("ms", "ns", "mm", "none")


@dataclass
class NegativeAssignment:
    vectors: np.ndarray  # (m, c_d) raw center values
    source: np.ndarray  # (m, c_d) class index per dimension

    def __len__(self):
        return self.vectors.shape[0]


class ConfusionStats:
    """Running K x K count of (true, predicted) pairs."""

    def __init__(self, k: int):
        self.counts = np.zeros((k, k), dtype=np.int64)

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def reset(self) -> None:
        self.counts[:] = 0

    def copy(self) -> "ConfusionStats":
        out = ConfusionStats(self.k)
        out.counts[:] = self.counts
        return out


def record_confusion(stats: ConfusionStats, labels, predictions) -> ConfusionStats:
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.shape != predictions.shape:
        raise ValueError("labels and predictions differ in length")
    np.add.at(stats.counts, (labels, predictions), 1)
    return stats


def _nearest_rival_center(centers: np.ndarray, t: int) -> int:
    d = ((centers - centers[t]) ** 2).sum(axis=1)
    d[t] = np.inf
    return int(np.argmin(d))


def hardest_rival(stats: ConfusionStats, t: int, centers: np.ndarray) -> int:
    """Class that most often absorbed class ``t`` samples.

    Falls back to the nearest other center (squared Euclidean, raw space)
    while row ``t`` has no off-diagonal counts.
    """
    row = stats.counts[t].astype(np.int64)
    row[t] = -1
    if row.max() <= 0:
        return _nearest_rival_center(np.asarray(centers), t)
    return int(np.argmax(row))


def _assemble(centers: np.ndarray, source: np.ndarray) -> NegativeAssignment:
    cols = np.arange(centers.shape[1])
    return NegativeAssignment(centers[source, cols], source)


def ms_nss(embeddings, labels, centers) -> NegativeAssignment:
    centers = np.asarray(centers)
    labels = np.asarray(labels, dtype=np.int64)
    se = sigmoid(np.atleast_2d(embeddings))
    sc = sigmoid(centers)
    eta = (se[:, None, :] - sc[None, :, :]) ** 2  # (m, K, c_d)
    eta[np.arange(len(labels)), labels, :] = np.inf
    source = np.argmin(eta, axis=1)
    return _assemble(centers, source)


def _row_source(classes, dim):
    return np.repeat(np.asarray(classes, dtype=np.int64)[:, None], dim, axis=1)


def ns_nss(embeddings, labels, predictions, centers, stats: ConfusionStats) -> NegativeAssignment:
    """Records this batch into ``stats`` and then picks whole-row negatives."""
    centers = np.asarray(centers)
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    record_confusion(stats, labels, predictions)
    rival = {}
    chosen = predictions.copy()
    for i in np.flatnonzero(predictions == labels):
        t = int(labels[i])
        if t not in rival:
            rival[t] = hardest_rival(stats, t, centers)
        chosen[i] = rival[t]
    return _assemble(centers, _row_source(chosen, centers.shape[1]))


def mm_nss(embeddings, labels, predictions, centers, stats: ConfusionStats) -> NegativeAssignment:
    centers = np.asarray(centers)
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    record_confusion(stats, labels, predictions)
    source = ms_nss(embeddings, labels, centers).source
    wrong = predictions != labels
    source[wrong] = predictions[wrong][:, None]
    return _assemble(centers, source)


def select_negatives(mode, embeddings, labels, predictions, centers, stats):
    if mode == "ms":
        return ms_nss(embeddings, labels, centers)
    if mode == "ns":
        return ns_nss(embeddings, labels, predictions, centers, stats)
    if mode == "mm":
        return mm_nss(embeddings, labels, predictions, centers, stats)
    raise ValueError(f"no negative selection for mode {mode!r}")
