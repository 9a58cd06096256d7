"""SGD training loop, learning-rate schedule and evaluation metrics."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import attention as att
from .attention import AttentionParams
from .centers import ClassCenters, init_centers
from .data import Dataset, jitter, stratified_folds
from .losses import LossBreakdown, amtc3l, ce_loss, multitask, tc3l_fixed
from .model import ModelConfig, ModelParams, backward, embedding_grad, forward, init_params
from .nss import ConfusionStats, NegativeAssignment, select_negatives
from .numeric import DTYPE, Rng

log = logging.getLogger(__name__)

NSS_MODES = ("ms", "ns", "mm", "none")
MARGIN_MODES = ("adaptive", "fixed")

# child-stream keys under the run seed
_INIT_MODEL, _INIT_ATTENTION, _INIT_CENTERS, _SHUFFLE, _JITTER, _FOLDS = range(6)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.1
    nss: str = "mm"
    margin_mode: str = "adaptive"
    fixed_margin: float = 1.0
    lr: float = 0.05
    center_lr: Optional[float] = None
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 60
    lr_decay_every: int = 20
    lr_decay_factor: float = 0.1
    batch_size: int = 64
    seed: int = 0
    attention: str = "element"
    attention_reduction: int = 4
    jitter_std: float = 0.0
    center_weight_decay: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lambda must be nonnegative")
        if self.nss not in NSS_MODES:
            raise ConfigError(f"nss must be one of {NSS_MODES}")
        if self.margin_mode not in MARGIN_MODES:
            raise ConfigError(f"margin_mode must be one of {MARGIN_MODES}")
        if self.attention not in att.MODES:
            raise ConfigError(f"attention must be one of {att.MODES}")
        if self.lr <= 0 or (self.center_lr is not None and self.center_lr <= 0):
            raise ConfigError("learning rates must be positive")
        if self.weight_decay < 0 or self.center_weight_decay < 0 or self.jitter_std < 0:
            raise ConfigError("weight_decay and jitter_std must be nonnegative")
        if self.epochs < 1 or self.lr_decay_every < 1 or self.batch_size < 1:
            raise ConfigError("epochs, lr_decay_every and batch_size must be positive")
        if self.lr_decay_factor <= 0:
            raise ConfigError("lr_decay_factor must be positive")
        if self.attention_reduction < 1:
            raise ConfigError("attention_reduction must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    @property
    def effective_center_lr(self) -> float:
        return self.lr if self.center_lr is None else self.center_lr

    @property
    def metric_active(self) -> bool:
        return self.lam > 0 and self.nss != "none"

    def check_against(self, model_cfg: ModelConfig) -> None:
        if self.margin_mode == "fixed" and not 0 < self.fixed_margin <= model_cfg.c_d:
            raise ConfigError(f"fixed_margin must lie in (0, c_d={model_cfg.c_d}]")
        att.bottleneck_width(model_cfg.c_d, self.attention_reduction)


@dataclass
class TrainState:
    model_cfg: ModelConfig
    params: ModelParams
    velocity: ModelParams
    attention: AttentionParams
    attention_velocity: AttentionParams
    centers: ClassCenters
    stats: ConfusionStats
    attention_mode: str = "element"
    iteration: int = 0
    warnings: int = 0

    def mask_fn(self):
        if not att.uses_pixel(self.attention_mode):
            return None
        p = self.attention
        return lambda ctx: att.attend_pixelwise(p, ctx)


def init_state(model_cfg: ModelConfig, cfg: TrainConfig) -> TrainState:
    cfg.check_against(model_cfg)
    rng = Rng(cfg.seed)
    params = init_params(model_cfg, rng.split(_INIT_MODEL))
    attn = att.init_attention(model_cfg.c_d, cfg.attention_reduction, rng.split(_INIT_ATTENTION))
    centers = init_centers(model_cfg.k_classes, model_cfg.c_d, rng.split(_INIT_CENTERS))
    return TrainState(
        model_cfg=model_cfg,
        params=params,
        velocity=params.zeros_like(),
        attention=attn,
        attention_velocity=attn.zeros_like(),
        centers=centers,
        stats=ConfusionStats(model_cfg.k_classes),
        attention_mode=cfg.attention,
    )


def sgd_step(param, velocity, grad, lr, momentum, weight_decay):
    """Heavy-ball SGD with L2 weight decay folded into the gradient.

    ``v <- momentum*v + grad + weight_decay*param``; ``param <- param - lr*v``.
    """
    v = momentum * velocity + grad + weight_decay * param
    return param - lr * v, v


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step decay: multiply by ``lr_decay_factor`` every ``lr_decay_every`` epochs."""
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    return cfg.lr * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


@dataclass
class StepRecord:
    iteration: int
    epoch: int
    lr: float
    loss: LossBreakdown
    labels: np.ndarray
    predictions: np.ndarray


def _update(obj, vel, grads, names, lr, cfg: TrainConfig):
    for n in names:
        p, v = sgd_step(getattr(obj, n), getattr(vel, n), getattr(grads, n), lr, cfg.momentum, cfg.weight_decay)
        setattr(obj, n, p)
        setattr(vel, n, v)


_ELEMENT_NAMES = ("el_w1", "el_b1", "el_w2", "el_b2")
_PIXEL_NAMES = ("px_w", "px_b")


@dataclass
class StepGrads:
    loss: LossBreakdown
    model: ModelParams
    attention: AttentionParams
    attention_names: list[str]
    centers: Optional[np.ndarray]
    predictions: np.ndarray
    source: Optional[np.ndarray]
    clamped: int


def loss_and_grads(state: TrainState, x, y, cfg: TrainConfig, source=None) -> StepGrads:
    """Combined loss of a batch and its gradients for every trainable array.

    Negatives are chosen by ``cfg.nss`` (which records the batch into
    ``state.stats`` for ns/mm) unless ``source`` fixes the per-dimension
    negative classes, in which case the statistics are left untouched.
    Attention and center gradients are only produced for the parts that take
    part in the loss; ``attention_names`` lists the attention arrays that do.
    """
    p = state.params
    y = np.asarray(y, dtype=np.int64)
    pixel = att.uses_pixel(state.attention_mode)
    element = att.uses_element(state.attention_mode)
    trace = forward(p, state.model_cfg, x, state.mask_fn())
    ce, d_logits, clamped = ce_loss(trace.probabilities, y)

    metric = 0.0
    d_emb = None
    d_centers = None
    att_grads = state.attention.zeros_like()
    att_names: list[str] = []
    centers = state.centers.matrix

    if cfg.nss != "none":
        if source is None:
            neg = select_negatives(cfg.nss, trace.embedding, y, trace.predictions, centers, state.stats)
        else:
            source = np.asarray(source, dtype=np.int64)
            neg = NegativeAssignment(centers[source, np.arange(centers.shape[1])], source)
        source = neg.source
        if cfg.margin_mode == "fixed":
            metric, g = tc3l_fixed(trace.embedding, centers, y, neg, cfg.fixed_margin)
        else:
            if element:
                w, hid = att.elementwise_forward(state.attention, trace.embedding)
            else:
                w = np.ones_like(trace.embedding)
            metric, g = amtc3l(trace.embedding, w, centers, y, neg)
        if cfg.metric_active:
            d_emb = cfg.lam * g.d_embeddings
            d_centers = cfg.lam * g.d_centers
            if cfg.margin_mode == "adaptive" and element:
                eg, d_e_att = att.elementwise_backward(state.attention, trace.embedding, hid, w, cfg.lam * g.d_weights)
                d_emb = d_emb + d_e_att
                for n in _ELEMENT_NAMES:
                    setattr(att_grads, n, getattr(eg, n))
                att_names.extend(_ELEMENT_NAMES)

    d_ctx = None
    if pixel:
        d_e = embedding_grad(p, d_logits, d_emb)
        hw = trace.context.shape[-2] * trace.context.shape[-1]
        d_mask = np.einsum("mc,mchw->mhw", d_e, trace.context) / hw
        pg, d_ctx = att.pixelwise_backward(state.attention, trace.context, trace.mask, d_mask)
        att_grads.px_w, att_grads.px_b = pg.px_w, pg.px_b
        att_names.extend(_PIXEL_NAMES)

    return StepGrads(
        loss=multitask(ce, metric, cfg.lam),
        model=backward(p, trace, d_logits, d_emb, d_ctx),
        attention=att_grads,
        attention_names=att_names,
        centers=d_centers,
        predictions=trace.predictions,
        source=source,
        clamped=clamped,
    )


def train_step(state: TrainState, x, y, cfg: TrainConfig, lr: float, center_lr: float) -> StepRecord:
    """One forward/backward/update pass on a batch. Mutates ``state``."""
    g = loss_and_grads(state, x, y, cfg)
    state.warnings += g.clamped
    _update(state.params, state.velocity, g.model, ModelParams.names(), lr, cfg)
    if g.attention_names:
        _update(state.attention, state.attention_velocity, g.attention, g.attention_names, lr, cfg)
    if g.centers is not None:
        c = state.centers
        c.matrix, c.velocity = sgd_step(c.matrix, c.velocity, g.centers, center_lr, cfg.momentum, cfg.center_weight_decay)
    rec = StepRecord(
        iteration=state.iteration,
        epoch=-1,
        lr=lr,
        loss=g.loss,
        labels=np.asarray(y),
        predictions=g.predictions,
    )
    state.iteration += 1
    return rec


def batches(n: int, batch_size: int, rng: Rng) -> Iterator[np.ndarray]:
    """Shuffled index batches; the last partial batch is kept."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


@dataclass
class EpochResult:
    records: list[StepRecord]
    stats: np.ndarray  # confusion stats just before the end-of-epoch reset


def train_epoch(state: TrainState, ds: Dataset, cfg: TrainConfig, epoch: int) -> EpochResult:
    rng = Rng(cfg.seed)
    lr = lr_at(epoch, cfg)
    center_lr = cfg.effective_center_lr * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)
    jit = rng.split(_JITTER).split(epoch)
    state.stats.reset()
    records = []
    for idx in batches(len(ds), cfg.batch_size, rng.split(_SHUFFLE).split(epoch)):
        x = jitter(ds.features[idx], cfg.jitter_std, jit)
        rec = train_step(state, x, ds.labels[idx], cfg, lr, center_lr)
        rec.epoch = epoch
        records.append(rec)
    snapshot = state.stats.counts.copy()
    state.stats.reset()
    return EpochResult(records, snapshot)


@dataclass
class TrainResult:
    state: TrainState
    records: list[StepRecord] = field(default_factory=list)
    epoch_stats: list[np.ndarray] = field(default_factory=list)


def fit(model_cfg: ModelConfig, cfg: TrainConfig, ds: Dataset, on_epoch=None) -> TrainResult:
    if ds.d_in != model_cfg.d_in or ds.k_classes != model_cfg.k_classes:
        raise ConfigError(
            f"dataset has d_in={ds.d_in}, K={ds.k_classes}; model expects "
            f"d_in={model_cfg.d_in}, K={model_cfg.k_classes}"
        )
    state = init_state(model_cfg, cfg)
    result = TrainResult(state)
    for epoch in range(cfg.epochs):
        er = train_epoch(state, ds, cfg, epoch)
        result.records.extend(er.records)
        result.epoch_stats.append(er.stats)
        if on_epoch is not None:
            on_epoch(epoch, er)
    if state.warnings:
        log.warning("%d probabilities were clamped before taking logs", state.warnings)
    return result


@dataclass
class MetricsReport:
    overall_accuracy: float
    per_class_accuracy: list[float]
    mean_per_class_accuracy: float
    confusion: np.ndarray
    intra_class_compactness: float
    inter_class_separation: float

    def to_json_dict(self) -> dict:
        return {
            "overall_accuracy": self.overall_accuracy,
            "per_class_accuracy": [None if math.isnan(a) else a for a in self.per_class_accuracy],
            "mean_per_class_accuracy": self.mean_per_class_accuracy,
            "confusion": [int(v) for v in np.asarray(self.confusion).reshape(-1)],
            "intra_class_compactness": self.intra_class_compactness,
            "inter_class_separation": self.inter_class_separation,
        }


def metrics_from(labels, predictions, embeddings, k: int) -> MetricsReport:
    """Accuracy figures plus embedding geometry.

    Compactness is the mean squared distance of each embedding to its class
    centroid; separation is the smallest squared distance between two class
    centroids. Centroids are the empirical class means of ``embeddings``.
    Classes absent from ``labels`` get a NaN accuracy and are left out of the
    per-class mean.
    """
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    support = confusion.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(support > 0, np.diag(confusion) / np.maximum(support, 1), np.nan)
    present = support > 0
    overall = float(np.trace(confusion) / confusion.sum())
    mean_pc = float(per_class[present].mean())

    emb = np.asarray(embeddings, dtype=DTYPE)
    cents = np.zeros((k, emb.shape[1]), dtype=DTYPE)
    np.add.at(cents, labels, emb)
    cents[present] /= support[present, None]
    compact = float(((emb - cents[labels]) ** 2).sum(axis=1).mean())
    pc = cents[present]
    if len(pc) >= 2:
        d = ((pc[:, None, :] - pc[None, :, :]) ** 2).sum(axis=-1)
        separation = float(d[~np.eye(len(pc), dtype=bool)].min())
    else:
        separation = float("nan")
    return MetricsReport(overall, [float(a) for a in per_class], mean_pc, confusion, compact, separation)


def predict(state: TrainState, features):
    return forward(state.params, state.model_cfg, features, state.mask_fn())


def evaluate(state: TrainState, ds: Dataset) -> MetricsReport:
    trace = predict(state, ds.features)
    return metrics_from(ds.labels, trace.predictions, trace.embedding, state.model_cfg.k_classes)


def mean_report(reports: list[MetricsReport]) -> MetricsReport:
    pcs = np.array([r.per_class_accuracy for r in reports], dtype=DTYPE)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN columns
        per_class = np.nanmean(pcs, axis=0)
    return MetricsReport(
        overall_accuracy=float(np.mean([r.overall_accuracy for r in reports])),
        per_class_accuracy=[float(a) for a in per_class],
        mean_per_class_accuracy=float(np.mean([r.mean_per_class_accuracy for r in reports])),
        confusion=np.sum([r.confusion for r in reports], axis=0),
        intra_class_compactness=float(np.mean([r.intra_class_compactness for r in reports])),
        inter_class_separation=float(np.mean([r.inter_class_separation for r in reports])),
    )


def kfold(ds: Dataset, folds: int, model_cfg: ModelConfig, cfg: TrainConfig):
    """Stratified k-fold cross-validation; returns (per-fold reports, mean)."""
    parts = stratified_folds(ds.labels, ds.k_classes, folds, Rng(cfg.seed).split(_FOLDS))
    reports = []
    for f, val_idx in enumerate(parts):
        train_idx = np.sort(np.concatenate([p for g, p in enumerate(parts) if g != f]))
        result = fit(model_cfg, cfg, ds.subset(train_idx))
        reports.append(evaluate(result.state, ds.subset(val_idx)))
    return reports, mean_report(reports)
