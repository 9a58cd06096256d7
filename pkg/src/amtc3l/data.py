"""Synthetic imbalanced datasets, CSV I/O, augmentation and splitting."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .numeric import DTYPE, Rng

log = logging.getLogger(__name__)

EXPRESSION_NAMES = ("Surprise", "Fear", "Disgust", "Happiness", "Sadness", "Anger", "Neutral")
# dominant class ~39%, rarest ~3%; same ordering as EXPRESSION_NAMES
DEFAULT_PROPORTIONS = (0.10, 0.03, 0.06, 0.39, 0.16, 0.06, 0.20)


class DataError(ValueError):
    pass


def default_proportions(k: int) -> tuple[float, ...]:
    if k == len(DEFAULT_PROPORTIONS):
        return DEFAULT_PROPORTIONS
    return tuple([1.0 / k] * k)


@dataclass(frozen=True)
class DataConfig:
    k_classes: int = 7
    d_in: int = 32
    n_total: int = 2800
    proportions: Optional[tuple[float, ...]] = None
    separation: float = 3.0
    noise_std: float = 1.0
    jitter_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.k_classes < 2:
            raise DataError("k_classes must be at least 2")
        if self.d_in < 1 or self.n_total < 1:
            raise DataError("d_in and n_total must be positive")
        if self.separation <= 0 or self.noise_std < 0 or self.jitter_std < 0:
            raise DataError("separation must be positive and spreads nonnegative")
        p = self.resolved_proportions()
        if len(p) != self.k_classes:
            raise DataError(f"{len(p)} proportions given for {self.k_classes} classes")
        if min(p) < 0 or abs(sum(p) - 1.0) > 1e-9:
            raise DataError("proportions must be nonnegative and sum to 1")

    def resolved_proportions(self) -> tuple[float, ...]:
        if self.proportions is None:
            return default_proportions(self.k_classes)
        return tuple(float(x) for x in self.proportions)


@dataclass
class Dataset:
    features: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,)
    k_classes: int
    class_names: Optional[tuple[str, ...]] = field(default=None)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise DataError("features must be (n, d) with one label per row")
        if len(self.labels) == 0:
            raise DataError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.k_classes:
            raise DataError(f"labels must lie in [0, {self.k_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def d_in(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.k_classes, self.class_names)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k_classes)


def largest_remainder(n: int, proportions: Sequence[float]) -> np.ndarray:
    """Integer counts summing to ``n``; leftover units go to the largest
    fractional parts, lowest index first on ties."""
    quotas = [n * p for p in proportions]
    counts = [math.floor(q) for q in quotas]
    left = n - sum(counts)
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:left]:
        counts[i] += 1
    return np.array(counts, dtype=np.int64)


def gen_blobs(cfg: DataConfig) -> Dataset:
    """Gaussian blobs around ``separation``-scaled random unit directions."""
    rng = Rng(cfg.seed)
    counts = largest_remainder(cfg.n_total, cfg.resolved_proportions())
    if counts.min() == 0:
        raise DataError(f"class allocation {counts.tolist()} leaves a class empty")
    dirs = rng.split(0).normal((cfg.k_classes, cfg.d_in))
    means = cfg.separation * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    labels = np.repeat(np.arange(cfg.k_classes), counts)
    noise = rng.split(1).normal((cfg.n_total, cfg.d_in), std=1.0)
    features = means[labels] + cfg.noise_std * noise
    order = rng.split(2).permutation(cfg.n_total)
    names = EXPRESSION_NAMES if cfg.k_classes == len(EXPRESSION_NAMES) else None
    return Dataset(features[order], labels[order], cfg.k_classes, names)


def save_csv(ds: Dataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{j}" for j in range(ds.d_in)] + ["label"])
        for x, y in zip(ds.features, ds.labels):
            w.writerow([format(v, ".17g") for v in x] + [int(y)])


def load_csv(path, k_classes: Optional[int] = None) -> Dataset:
    """Read ``f0,...,f{D-1},label`` rows. Errors carry the 1-based line number."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[-1].strip() != "label":
            raise DataError(f"{path}: line 1: header must end with 'label'")
        feat_cols = [h.strip() for h in header[:-1]]
        if feat_cols != [f"f{j}" for j in range(len(feat_cols))] or not feat_cols:
            raise DataError(f"{path}: line 1: feature columns must be f0..f{{D-1}}")
        width = len(header)
        xs, ys = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DataError(f"{path}: line {lineno}: expected {width} cells, got {len(row)}")
            try:
                xs.append([float(c) for c in row[:-1]])
                y = int(row[-1])
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
            if y < 0 or (k_classes is not None and y >= k_classes):
                raise DataError(f"{path}: line {lineno}: label {y} out of range")
            ys.append(y)
    if not ys:
        raise DataError(f"{path}: no samples")
    k = k_classes if k_classes is not None else max(max(ys) + 1, 2)
    names = EXPRESSION_NAMES if k == len(EXPRESSION_NAMES) else None
    return Dataset(np.array(xs, dtype=DTYPE), np.array(ys), k, names)


def jitter(features, jitter_std: float, rng: Rng):
    """Feature-space augmentation: add N(0, jitter_std^2) to every entry."""
    if jitter_std < 0:
        raise ValueError("jitter_std must be nonnegative")
    features = np.asarray(features, dtype=DTYPE)
    if jitter_std == 0:
        return features
    return features + rng.normal(features.shape, std=jitter_std)


def split(ds: Dataset, train_fraction: float, rng: Rng) -> tuple[Dataset, Dataset]:
    """Stratified split; each class keeps round(n_c * fraction) training rows."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    train_idx, test_idx = [], []
    for c in range(ds.k_classes):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) == 0:
            continue
        idx = idx[rng.split(c).permutation(len(idx))]
        if len(idx) == 1:
            log.warning("class %d has a single sample; keeping it for training", c)
            n_train = 1
        else:
            n_train = min(max(int(math.floor(len(idx) * train_fraction + 0.5)), 1), len(idx) - 1)
        train_idx.append(idx[:n_train])
        test_idx.append(idx[n_train:])
    tr = np.sort(np.concatenate(train_idx))
    te = np.sort(np.concatenate(test_idx))
    return ds.subset(tr), ds.subset(te)


def stratified_folds(labels, k_classes: int, folds: int, rng: Rng) -> list[np.ndarray]:
    """Deal each class's shuffled indices round-robin across folds.

    The dealing position carries over from one class to the next so fold
    sizes differ by at most one.
    """
    labels = np.asarray(labels)
    if folds < 2 or len(labels) < folds:
        raise ValueError("need folds >= 2 and at least one sample per fold")
    buckets: list[list[int]] = [[] for _ in range(folds)]
    pos = 0
    for c in range(k_classes):
        idx = np.flatnonzero(labels == c)
        if 0 < len(idx) < folds:
            log.warning("class %d has %d samples for %d folds", c, len(idx), folds)
        for i in idx[rng.split(c).permutation(len(idx))]:
            buckets[pos % folds].append(int(i))
            pos += 1
    return [np.sort(np.array(b, dtype=np.int64)) for b in buckets]
