"""Detector losses: AM-Softmax classification, region L1, gated ratio L1."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .config import BlendType

DEFAULT_MARGIN = 0.35
DEFAULT_SCALE = 30.0


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.1  # region
    mu: float = 0.05  # blend type
    gamma: float = 0.1  # ratio

    def __post_init__(self):
        if min(self.alpha, self.mu, self.gamma) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class AmSoftmaxParams:
    margin: float = DEFAULT_MARGIN
    scale: float = DEFAULT_SCALE

    def __post_init__(self):
        if self.margin < 0 or self.scale <= 0:
            raise ValueError("AM-Softmax needs margin >= 0 and scale > 0")


def cosine_logits(features, class_weights):
    """Cosines between L2-normalised feature rows and weight columns."""
    f = nn.l2_normalize(features, axis=-1)
    w = nn.l2_normalize(class_weights, axis=0)
    return nn.matmul(f, w)


def am_softmax_loss(cos, labels, params=AmSoftmaxParams()):
    """Per-sample ``-log softmax(s * (cos - m * onehot(y)))[y]``."""
    cos = nn.as_tensor(cos)
    single = cos.ndim == 1
    if single:
        cos = nn.reshape(cos, (1, -1))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    n, k = cos.shape
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must be {n} class indices in 0..{k - 1}")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    logits = (cos - params.margin * onehot) * params.scale
    loss = -nn.log_softmax(logits)[np.arange(n), labels]
    return loss[0] if single else loss


def am_softmax_from_features(features, class_weights, labels, params=AmSoftmaxParams()):
    features = nn.as_tensor(features)
    if np.any(np.linalg.norm(np.atleast_2d(features.data), axis=-1) == 0):
        raise ValueError("AM-Softmax feature has zero norm")
    return am_softmax_loss(cosine_logits(features, class_weights), labels, params)


def region_loss(m_gt, m_e):
    """Mean absolute deviation over the (H/16, W/16) map; batched on leading axes."""
    m_gt = np.asarray(m_gt, dtype=np.float64)
    m_e = nn.as_tensor(m_e)
    if m_gt.shape != m_e.shape:
        raise ValueError(f"region maps differ in shape: {m_gt.shape} vs {m_e.shape}")
    return nn.mean(nn.tabs(m_e - m_gt), axis=(-2, -1))


def ratio_loss(a_gt, a_e, t_gt):
    """``|a_gt - a_e|`` where the type label is mixup, else 0."""
    t_gt = np.atleast_1d(np.asarray(t_gt))
    a_e = nn.as_tensor(a_e)
    single = a_e.ndim == 0
    a_e = nn.reshape(a_e, (-1,))
    gate = (t_gt == BlendType.MIXUP).astype(np.float64)
    a_gt = np.atleast_1d(np.asarray(a_gt if a_gt is not None else np.nan, dtype=np.float64))
    a_gt = np.broadcast_to(a_gt, gate.shape)
    if np.any(gate.astype(bool) & ~np.isfinite(a_gt)):
        raise ValueError("mixup sample is missing its ground-truth ratio")
    target = np.where(gate > 0, a_gt, 0.0)
    loss = nn.tabs(a_e - target) * gate
    return loss[0] if single else loss


@dataclass
class LossBreakdown:
    """Per-sample loss tensors; ``total`` is the weighted sum."""

    main: nn.Tensor
    region: nn.Tensor
    type: nn.Tensor
    ratio: nn.Tensor
    total: nn.Tensor

    def means(self):
        return {"L_Main": float(self.main.data.mean()), "L_R": float(self.region.data.mean()),
                "L_T": float(self.type.data.mean()), "L_A": float(self.ratio.data.mean()),
                "total": float(self.total.data.mean())}


def combine(main, region, type_, ratio, weights=LossWeights()):
    total = main + weights.alpha * region + weights.mu * type_ + weights.gamma * ratio
    return LossBreakdown(nn.as_tensor(main), nn.as_tensor(region), nn.as_tensor(type_),
                         nn.as_tensor(ratio), nn.as_tensor(total))


def total_loss(labels, out, weights=LossWeights(), am=AmSoftmaxParams()):
    """Weighted detector loss for a batch.

    ``labels`` is a :class:`~forgeaug.records.LabelBatch` (or a single
    :class:`~forgeaug.records.SampleRecord`); ``out`` a detector output.
    """
    from .records import LabelBatch

    if not isinstance(labels, LabelBatch):
        labels = LabelBatch.from_records([labels])
    main = am_softmax_loss(out.main_cos, labels.binary, am)
    type_ = am_softmax_loss(out.type_cos, labels.t_gt, am)
    region = region_loss(labels.m_gt, out.region_map)
    ratio = ratio_loss(labels.a_gt, out.ratio, labels.t_gt)
    return combine(main, region, type_, ratio, weights)
