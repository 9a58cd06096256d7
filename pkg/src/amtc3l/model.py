"""Trainable network: a two-layer encoder standing in for a backbone, two
pointwise channel-reduction maps, global average pooling and a linear head.

All functions take batched arrays (leading sample axis) but also accept a
single sample, since every contraction is written against trailing axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Callable, Optional

import numpy as np

from .numeric import DTYPE, Rng, argmax_lowest, softmax


@dataclass(frozen=True)
class ModelConfig:
    d_in: int = 32
    c_f: int = 16
    h_f: int = 2
    w_f: int = 2
    c_d: int = 8
    k_classes: int = 7
    hidden: int = 32

    def __post_init__(self):
        for f in fields(self):
            if int(getattr(self, f.name)) < 1:
                raise ValueError(f"{f.name} must be positive")
        if self.c_d > self.c_f:
            raise ValueError("c_d must not exceed c_f")
        if self.k_classes < 2:
            raise ValueError("k_classes must be at least 2")

    @property
    def c_mid(self) -> int:
        # ceil(sqrt(c_f * c_d)) in integer arithmetic
        n = self.c_f * self.c_d
        r = math.isqrt(n)
        return r if r * r == n else r + 1

    @property
    def feature_size(self) -> int:
        return self.c_f * self.h_f * self.w_f


@dataclass
class ModelParams:
    """Parameter arrays in checkpoint declaration order."""

    enc_w1: np.ndarray  # (hidden, d_in)
    enc_b1: np.ndarray  # (hidden,)
    enc_w2: np.ndarray  # (c_f*h_f*w_f, hidden)
    enc_b2: np.ndarray
    red_w1: np.ndarray  # (c_mid, c_f)
    red_b1: np.ndarray
    red_w2: np.ndarray  # (c_d, c_mid)
    red_b2: np.ndarray
    cls_w: np.ndarray  # (K, c_d)
    cls_b: np.ndarray

    @staticmethod
    def names() -> list[str]:
        return [f.name for f in fields(ModelParams)]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in self.names()]

    def copy(self) -> "ModelParams":
        return ModelParams(*(a.copy() for a in self.arrays()))

    def zeros_like(self) -> "ModelParams":
        return ModelParams(*(np.zeros_like(a) for a in self.arrays()))

    @classmethod
    def shapes(cls, cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
        fs, cm = cfg.feature_size, cfg.c_mid
        return {
            "enc_w1": (cfg.hidden, cfg.d_in),
            "enc_b1": (cfg.hidden,),
            "enc_w2": (fs, cfg.hidden),
            "enc_b2": (fs,),
            "red_w1": (cm, cfg.c_f),
            "red_b1": (cm,),
            "red_w2": (cfg.c_d, cm),
            "red_b2": (cfg.c_d,),
            "cls_w": (cfg.k_classes, cfg.c_d),
            "cls_b": (cfg.k_classes,),
        }

    def check(self, cfg: ModelConfig) -> None:
        for name, shape in self.shapes(cfg).items():
            a = getattr(self, name)
            if a.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {a.shape}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name}: non-finite entries")


def init_params(cfg: ModelConfig, rng: Rng) -> ModelParams:
    """Zero biases, weights ~ N(0, 1/fan_in)."""
    arrays = {}
    for name, shape in ModelParams.shapes(cfg).items():
        if len(shape) == 1:
            arrays[name] = np.zeros(shape, dtype=DTYPE)
        else:
            arrays[name] = rng.normal(shape, std=1.0 / math.sqrt(shape[1]))
    return ModelParams(**arrays)


def encode(params: ModelParams, cfg: ModelConfig, inputs):
    """Map inputs ``(..., d_in)`` to feature maps ``(..., c_f, h_f, w_f)``."""
    x = np.asarray(inputs, dtype=DTYPE)
    h = np.tanh(x @ params.enc_w1.T + params.enc_b1)
    f = h @ params.enc_w2.T + params.enc_b2
    return f.reshape(f.shape[:-1] + (cfg.c_f, cfg.h_f, cfg.w_f))


def _pointwise(w, b, fmap):
    return np.einsum("kc,...chw->...khw", w, fmap) + b[:, None, None]


def contextualize(params: ModelParams, fmap, activation: bool = True):
    """Apply the two channel-reduction maps at every spatial position.

    ``activation=False`` replaces the inner tanh by the identity (test hook).
    """
    fmap = np.asarray(fmap, dtype=DTYPE)
    if fmap.shape[-3] != params.red_w1.shape[1]:
        raise ValueError(f"feature map has {fmap.shape[-3]} channels, expected {params.red_w1.shape[1]}")
    z = _pointwise(params.red_w1, params.red_b1, fmap)
    a = np.tanh(z) if activation else z
    return _pointwise(params.red_w2, params.red_b2, a)


def pool(context):
    """Global average pooling over the two trailing spatial axes."""
    return np.asarray(context, dtype=DTYPE).mean(axis=(-2, -1))


def classify(params: ModelParams, embedding):
    return np.asarray(embedding, dtype=DTYPE) @ params.cls_w.T + params.cls_b


@dataclass
class ForwardTrace:
    """Batched intermediates of one forward pass, leading axis = sample."""

    inputs: np.ndarray
    hidden: np.ndarray
    features: np.ndarray
    red_pre: np.ndarray
    red_act: np.ndarray
    context: np.ndarray
    mask: Optional[np.ndarray]
    embedding: np.ndarray
    logits: np.ndarray
    probabilities: np.ndarray
    predictions: np.ndarray

    def __len__(self):
        return self.inputs.shape[0]


MaskFn = Callable[[np.ndarray], np.ndarray]


def forward(params: ModelParams, cfg: ModelConfig, inputs, mask_fn: Optional[MaskFn] = None) -> ForwardTrace:
    """Run the whole network on a batch ``(m, d_in)``.

    ``mask_fn`` maps the context maps ``(m, c_d, h, w)`` to a spatial mask
    ``(m, h, w)`` that multiplies the context before pooling.
    """
    x = np.atleast_2d(np.asarray(inputs, dtype=DTYPE))
    if x.shape[-1] != cfg.d_in:
        raise ValueError(f"inputs have {x.shape[-1]} features, expected {cfg.d_in}")
    hidden = np.tanh(x @ params.enc_w1.T + params.enc_b1)
    f = hidden @ params.enc_w2.T + params.enc_b2
    features = f.reshape(x.shape[0], cfg.c_f, cfg.h_f, cfg.w_f)
    red_pre = _pointwise(params.red_w1, params.red_b1, features)
    red_act = np.tanh(red_pre)
    context = _pointwise(params.red_w2, params.red_b2, red_act)
    mask = None
    if mask_fn is not None:
        mask = mask_fn(context)
        emb = pool(context * mask[:, None, :, :])
    else:
        emb = pool(context)
    logits = classify(params, emb)
    probs = softmax(logits)
    return ForwardTrace(
        inputs=x,
        hidden=hidden,
        features=features,
        red_pre=red_pre,
        red_act=red_act,
        context=context,
        mask=mask,
        embedding=emb,
        logits=logits,
        probabilities=probs,
        predictions=argmax_lowest(logits),
    )


def embedding_grad(params: ModelParams, d_logits, d_embedding=None):
    """Total gradient reaching the embedding from the head and any direct term."""
    d_e = np.asarray(d_logits, dtype=DTYPE) @ params.cls_w
    if d_embedding is not None:
        d_e = d_e + d_embedding
    return d_e


def backward(
    params: ModelParams,
    trace: ForwardTrace,
    d_logits,
    d_embedding=None,
    d_context=None,
) -> ModelParams:
    """Chain-rule gradients of a scalar loss for every model parameter.

    ``d_logits`` and ``d_embedding`` are per-sample gradients with respect to
    the logits and the pooled embedding; ``d_context`` is an extra gradient
    with respect to the (unmasked) context map, e.g. from a spatial mask.
    Sample contributions are reduced by summing over the sample axis.
    """
    m = len(trace)
    d_logits = np.asarray(d_logits, dtype=DTYPE)
    if d_logits.shape != trace.logits.shape:
        raise ValueError(f"d_logits shape {d_logits.shape} != {trace.logits.shape}")
    if d_embedding is not None and np.shape(d_embedding) != trace.embedding.shape:
        raise ValueError("d_embedding shape mismatch")
    if d_context is not None and np.shape(d_context) != trace.context.shape:
        raise ValueError("d_context shape mismatch")

    g_cls_w = d_logits.T @ trace.embedding
    g_cls_b = d_logits.sum(axis=0)
    d_e = embedding_grad(params, d_logits, d_embedding)

    hw = trace.context.shape[-2] * trace.context.shape[-1]
    d_ctx = np.broadcast_to(d_e[:, :, None, None] / hw, trace.context.shape)
    if trace.mask is not None:
        d_ctx = d_ctx * trace.mask[:, None, :, :]
    if d_context is not None:
        d_ctx = d_ctx + d_context

    g_red_w2 = np.einsum("mkhw,mchw->kc", d_ctx, trace.red_act)
    g_red_b2 = d_ctx.sum(axis=(0, 2, 3))
    d_act = np.einsum("kc,mkhw->mchw", params.red_w2, d_ctx)
    d_pre = d_act * (1.0 - trace.red_act**2)
    g_red_w1 = np.einsum("mkhw,mchw->kc", d_pre, trace.features)
    g_red_b1 = d_pre.sum(axis=(0, 2, 3))
    d_feat = np.einsum("kc,mkhw->mchw", params.red_w1, d_pre).reshape(m, -1)

    g_enc_w2 = d_feat.T @ trace.hidden
    g_enc_b2 = d_feat.sum(axis=0)
    d_hid = (d_feat @ params.enc_w2) * (1.0 - trace.hidden**2)
    g_enc_w1 = d_hid.T @ trace.inputs
    g_enc_b1 = d_hid.sum(axis=0)

    return ModelParams(
        enc_w1=g_enc_w1,
        enc_b1=g_enc_b1,
        enc_w2=g_enc_w2,
        enc_b2=g_enc_b2,
        red_w1=g_red_w1,
        red_b1=g_red_b1,
        red_w2=g_red_w2,
        red_b2=g_red_b2,
        cls_w=g_cls_w,
        cls_b=g_cls_b,
    )
