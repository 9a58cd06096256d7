"""Selective inclusion/exclusion attention.

The element-wise branch is a squeeze-excite style bottleneck on the pooled
embedding producing one weight in (0, 1) per embedding dimension; the sum of
a sample's weights is its adaptive margin. The optional pixel-wise branch
scores each spatial position of the context map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .numeric import DTYPE, Rng, sigmoid

MODES = ("none", "element", "pixel", "both")


def uses_element(mode: str) -> bool:
    return mode in ("element", "both")


def uses_pixel(mode: str) -> bool:
    return mode in ("pixel", "both")


def bottleneck_width(c_d: int, reduction: int) -> int:
    if reduction < 1:
        raise ValueError("attention_reduction must be >= 1")
    width = c_d // reduction
    if width < 1:
        raise ValueError(f"attention_reduction {reduction} too large for c_d={c_d}")
    return width


@dataclass
class AttentionParams:
    el_w1: np.ndarray  # (c_d // r, c_d)
    el_b1: np.ndarray
    el_w2: np.ndarray  # (c_d, c_d // r)
    el_b2: np.ndarray
    px_w: np.ndarray  # (c_d,)
    px_b: np.ndarray  # (1,)

    @staticmethod
    def names() -> list[str]:
        return [f.name for f in fields(AttentionParams)]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in self.names()]

    def copy(self) -> "AttentionParams":
        return AttentionParams(*(a.copy() for a in self.arrays()))

    def zeros_like(self) -> "AttentionParams":
        return AttentionParams(*(np.zeros_like(a) for a in self.arrays()))

    @staticmethod
    def shapes(c_d: int, reduction: int) -> dict[str, tuple[int, ...]]:
        r = bottleneck_width(c_d, reduction)
        return {
            "el_w1": (r, c_d),
            "el_b1": (r,),
            "el_w2": (c_d, r),
            "el_b2": (c_d,),
            "px_w": (c_d,),
            "px_b": (1,),
        }


def init_attention(c_d: int, reduction: int, rng: Rng) -> AttentionParams:
    arrays = {}
    for name, shape in AttentionParams.shapes(c_d, reduction).items():
        if name.endswith("_b1") or name.endswith("_b2") or name == "px_b":
            arrays[name] = np.zeros(shape, dtype=DTYPE)
        else:
            fan_in = shape[-1]
            arrays[name] = rng.normal(shape, std=1.0 / math.sqrt(fan_in))
    return AttentionParams(**arrays)


def zero_attention(c_d: int, reduction: int) -> AttentionParams:
    return AttentionParams(
        **{n: np.zeros(s, dtype=DTYPE) for n, s in AttentionParams.shapes(c_d, reduction).items()}
    )


def attend_elementwise(params: AttentionParams, embedding):
    """Per-dimension weights ``sigmoid(W2 tanh(W1 e + b1) + b2)``."""
    return elementwise_forward(params, embedding)[0]


def elementwise_forward(params: AttentionParams, embedding):
    e = np.asarray(embedding, dtype=DTYPE)
    hidden = np.tanh(e @ params.el_w1.T + params.el_b1)
    w = sigmoid(hidden @ params.el_w2.T + params.el_b2)
    return w, hidden


def elementwise_backward(params: AttentionParams, embedding, hidden, weights, d_weights):
    """Returns (grads as AttentionParams with zero pixel entries, d_embedding)."""
    d_pre = d_weights * weights * (1.0 - weights)
    g_w2 = d_pre.T @ hidden
    g_b2 = d_pre.sum(axis=0)
    d_hid = (d_pre @ params.el_w2) * (1.0 - hidden**2)
    g_w1 = d_hid.T @ embedding
    g_b1 = d_hid.sum(axis=0)
    d_e = d_hid @ params.el_w1
    grads = AttentionParams(
        el_w1=g_w1,
        el_b1=g_b1,
        el_w2=g_w2,
        el_b2=g_b2,
        px_w=np.zeros_like(params.px_w),
        px_b=np.zeros_like(params.px_b),
    )
    return grads, d_e


def attend_pixelwise(params: AttentionParams, context):
    """Spatial mask ``sigmoid(u . x[:, h, w] + b)`` for each position."""
    ctx = np.asarray(context, dtype=DTYPE)
    if ctx.shape[-3] != params.px_w.shape[0]:
        raise ValueError("context channel count does not match pixel-wise weights")
    return sigmoid(np.einsum("c,...chw->...hw", params.px_w, ctx) + params.px_b[0])


def pixelwise_backward(params: AttentionParams, context, mask, d_mask):
    """Returns (pixel grads as AttentionParams, d_context)."""
    d_pre = d_mask * mask * (1.0 - mask)
    g_u = np.einsum("mhw,mchw->c", d_pre, context)
    g_b = np.array([d_pre.sum()])
    d_ctx = params.px_w[None, :, None, None] * d_pre[:, None, :, :]
    grads = params.zeros_like()
    grads.px_w = g_u
    grads.px_b = g_b
    return grads, d_ctx


def margins(weights):
    """Adaptive margin per sample: the row sum of its weights."""
    return np.asarray(weights, dtype=DTYPE).sum(axis=-1)


def binarize_for_eval(weights):
    """Reporting view of the weights: 1 where w >= 0.5, else 0."""
    return (np.asarray(weights) >= 0.5).astype(DTYPE)
