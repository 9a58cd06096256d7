"""Loss functions with analytic gradients.

Distances in the metric losses are taken per dimension between sigmoid-
squashed values, so each dimension contributes a term in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .centers import accumulate_center_grads
from .nss import NegativeAssignment
from .numeric import DTYPE, sigmoid

PROB_FLOOR = 1e-300


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    metric: float
    total: float
    lam: float


@dataclass
class LossGrads:
    d_logits: Optional[np.ndarray] = None  # (m, K)
    d_embeddings: Optional[np.ndarray] = None  # (m, c_d)
    d_weights: Optional[np.ndarray] = None  # (m, c_d)
    d_centers: Optional[np.ndarray] = None  # (K, c_d)


def ce_loss(probabilities, labels):
    """Mean negative log-likelihood of the true class.

    Returns ``(loss, d_logits, n_clamped)``; ``d_logits`` assumes the
    probabilities came from a softmax over those logits.
    """
    p = np.atleast_2d(np.asarray(probabilities, dtype=DTYPE))
    labels = np.asarray(labels, dtype=np.int64)
    m = p.shape[0]
    rows = np.arange(m)
    p_true = p[rows, labels]
    clamped = int(np.count_nonzero(p_true < PROB_FLOOR))
    loss = float(-np.log(np.maximum(p_true, PROB_FLOOR)).sum() / m)
    d = p.copy()
    d[rows, labels] -= 1.0
    return loss, d / m, clamped


def _squashed_terms(embeddings, centers, labels, neg: NegativeAssignment):
    e = np.atleast_2d(np.asarray(embeddings, dtype=DTYPE))
    centers = np.asarray(centers, dtype=DTYPE)
    s_e = sigmoid(e)
    s_p = sigmoid(centers[np.asarray(labels, dtype=np.int64)])
    s_n = sigmoid(np.asarray(neg.vectors, dtype=DTYPE))
    return s_e, s_p, s_n


def _one_minus_neg_distance(embeddings, neg_vectors, s_e, s_n):
    """``1 - (s_e - s_n)^2`` without cancellation.

    ``1 - |s_e - s_n|`` equals ``sigmoid(e) + sigmoid(-n)`` when s_e <= s_n and
    ``sigmoid(n) + sigmoid(-e)`` otherwise; both are sums of positive terms,
    so the result stays strictly positive even when one sigmoid rounds to 1.
    """
    e = np.atleast_2d(np.asarray(embeddings, dtype=DTYPE))
    n = np.asarray(neg_vectors, dtype=DTYPE)
    gap = np.where(s_e <= s_n, sigmoid(e) + sigmoid(-n), sigmoid(n) + sigmoid(-e))
    return gap * (2.0 - gap)


def _metric_grads(coef, s_e, s_p, s_n, labels, neg, k, m):
    """Gradients of ``sum_ij coef_ij [(s_e-s_p)^2 - (s_e-s_n)^2] / (2m)``."""
    d_e = coef * (s_n - s_p) / m * s_e * (1.0 - s_e)
    d_p = -coef * (s_e - s_p) / m * s_p * (1.0 - s_p)
    d_n = coef * (s_e - s_n) / m * s_n * (1.0 - s_n)
    d_c = accumulate_center_grads(k, labels, d_p, neg.source, d_n)
    return d_e, d_c


def amtc3l(embeddings, weights, centers, labels, neg: NegativeAssignment):
    """Adaptive-margin loss-less triplet center loss.

    ``L = 1/(2m) sum_i [sum_j w_ij (d_p,ij - d_n,ij) + alpha_i]`` with
    ``alpha_i = sum_j w_ij`` and squashed squared distances ``d``. The value
    is strictly positive for finite inputs and weights in (0, 1).

    Returns ``(loss, LossGrads)`` with embedding, weight and center grads.
    """
    s_e, s_p, s_n = _squashed_terms(embeddings, centers, labels, neg)
    w = np.atleast_2d(np.asarray(weights, dtype=DTYPE))
    m = s_e.shape[0]
    d_pos = (s_e - s_p) ** 2
    slack = _one_minus_neg_distance(embeddings, neg.vectors, s_e, s_n)
    # w (d_p - d_n) + w, summed per dimension as w (d_p + (1 - d_n))
    loss = float((w * (d_pos + slack)).sum() / (2 * m))
    d_w = (d_pos + slack) / (2 * m)
    d_e, d_c = _metric_grads(w, s_e, s_p, s_n, labels, neg, np.shape(centers)[0], m)
    return loss, LossGrads(d_embeddings=d_e, d_weights=d_w, d_centers=d_c)


def tc3l_fixed(embeddings, centers, labels, neg: NegativeAssignment, margin: float):
    """Fixed-margin triplet center loss with a per-sample hinge.

    ``L = 1/(2m) sum_i max(0, sum_j (d_p,ij - d_n,ij) + margin)``.
    Samples whose hinge is closed contribute neither loss nor gradient.
    """
    s_e, s_p, s_n = _squashed_terms(embeddings, centers, labels, neg)
    m, c_d = s_e.shape
    if not 0 < margin <= c_d:
        raise ValueError(f"fixed margin must lie in (0, {c_d}]")
    arg = ((s_e - s_p) ** 2 - (s_e - s_n) ** 2).sum(axis=1) + margin
    active = (arg > 0).astype(DTYPE)
    loss = float((active * arg).sum() / (2 * m))
    coef = np.broadcast_to(active[:, None], s_e.shape)
    d_e, d_c = _metric_grads(coef, s_e, s_p, s_n, labels, neg, np.shape(centers)[0], m)
    return loss, LossGrads(d_embeddings=d_e, d_centers=d_c)


def multitask(ce: float, metric: float, lam: float) -> LossBreakdown:
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if lam == 0:
        return LossBreakdown(ce=ce, metric=metric, total=ce, lam=0.0)
    return LossBreakdown(ce=ce, metric=metric, total=ce + lam * metric, lam=lam)
