"""Sample categories and the rules turning them into detector targets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import TYPE_DATASET_FORGERY, TYPE_PRISTINE, BlendType
from .masks import HEAD_STRIDE, downsample

PRISTINE = "pristine"
DATASET_FORGERY = "dataset_forgery"
SYNTHESIZED = "synthesized"
CATEGORIES = (PRISTINE, DATASET_FORGERY, SYNTHESIZED)


class LabelError(ValueError):
    """A sample's targets violate the labelling rules."""


@dataclass
class SampleRecord:
    image: np.ndarray
    category: str
    m_gt: np.ndarray
    t_gt: int
    a_gt: float | None
    binary_label: int

    def validate(self):
        problems = label_violations(self.category, self.m_gt, self.t_gt, self.a_gt, self.binary_label)
        if problems:
            raise LabelError("; ".join(problems))
        return self


def label_violations(category, m_gt, t_gt, a_gt, binary_label):
    out = []
    if category not in CATEGORIES:
        return [f"unknown category {category!r}"]
    m_gt = np.asarray(m_gt)
    if m_gt.size and (m_gt.min() < 0 or m_gt.max() > 1):
        out.append("m_gt outside [0, 1]")
    if category == PRISTINE:
        if np.any(m_gt != 0):
            out.append("pristine m_gt must be all zero")
        if t_gt != TYPE_PRISTINE:
            out.append(f"pristine t_gt must be {TYPE_PRISTINE}")
        if binary_label != 0:
            out.append("pristine binary label must be 0")
    elif category == DATASET_FORGERY:
        if t_gt != TYPE_DATASET_FORGERY:
            out.append(f"dataset forgery t_gt must be {TYPE_DATASET_FORGERY}")
        if binary_label != 1:
            out.append("dataset forgery binary label must be 1")
    else:
        if t_gt not in (BlendType.ALPHA, BlendType.POISSON, BlendType.MIXUP):
            out.append("synthesized t_gt must be 0, 1 or 2")
        if binary_label != 1:
            out.append("synthesized binary label must be 1")
    if (a_gt is not None) != (t_gt == BlendType.MIXUP):
        out.append("a_gt must be present exactly when t_gt is mixup")
    return out


def pristine_record(image, head_shape):
    return SampleRecord(image, PRISTINE, np.zeros(head_shape), TYPE_PRISTINE, None, 0)


def dataset_forgery_record(image, gt_mask, stride=HEAD_STRIDE):
    """Stored masks are binarised at 0.5 before block-averaging."""
    m = downsample((np.asarray(gt_mask) > 0.5).astype(np.float64), stride)
    return SampleRecord(image, DATASET_FORGERY, m, TYPE_DATASET_FORGERY, None, 1)


def synthesized_record(image, blend, mask_used, ratio, stride=HEAD_STRIDE):
    blend = BlendType(blend)
    if blend == BlendType.NONE:
        raise LabelError("do-nothing samples are pristine, not synthesized")
    a_gt = float(ratio) if blend == BlendType.MIXUP else None
    return SampleRecord(image, SYNTHESIZED, downsample(mask_used, stride), int(blend), a_gt, 1)


def resolve_record(category, image, *, head_shape, blend=None, mask=None, ratio=None, stride=HEAD_STRIDE):
    """Targets for one input.

    A pristine with a do-nothing (or no) config stays pristine; a pristine
    with a real blend becomes a synthesized forgery; dataset forgeries keep
    their stored mask and get the out-of-pool type label.
    """
    if category == DATASET_FORGERY:
        if mask is None:
            raise LabelError("dataset forgery needs its ground-truth mask")
        return dataset_forgery_record(image, mask, stride)
    if category == PRISTINE:
        if blend is None or BlendType(blend) == BlendType.NONE:
            return pristine_record(image, head_shape)
        return synthesized_record(image, blend, mask, ratio, stride)
    raise LabelError(f"cannot resolve input category {category!r}")


@dataclass
class LabelBatch:
    m_gt: np.ndarray  # (N, h, w)
    t_gt: np.ndarray  # (N,)
    a_gt: np.ndarray  # (N,), NaN where absent
    binary: np.ndarray  # (N,)

    @classmethod
    def from_records(cls, records):
        return cls(
            m_gt=np.stack([np.asarray(r.m_gt, dtype=np.float64) for r in records]),
            t_gt=np.array([r.t_gt for r in records], dtype=np.intp),
            a_gt=np.array([np.nan if r.a_gt is None else r.a_gt for r in records]),
            binary=np.array([r.binary_label for r in records], dtype=np.intp),
        )
