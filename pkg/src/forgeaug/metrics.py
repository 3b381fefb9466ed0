"""Evaluation: rank AUC, thresholded accuracy and per-head diagnostics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import nn
from .blending import synthesize
from .config import BlendType, N_TYPE_LABELS
from .data import FaceDataset
from .detector import Detector, forgery_margin, score_forgery
from .policy import random_config
from .records import PRISTINE, LabelBatch, resolve_record

ACCURACY_THRESHOLD = 0.5


def _scores_labels(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    if np.any(np.isnan(s)):
        raise ValueError("scores contain NaN")
    return s, y.astype(bool)


def auc(scores, labels):
    """P(random forgery outscores random pristine), ties counted one half.

    Mann-Whitney U from average ranks.
    """
    s, y = _scores_labels(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(scores, labels, threshold=ACCURACY_THRESHOLD):
    s, y = _scores_labels(scores, labels)
    return float(np.mean((s >= threshold) == y))


@dataclass
class EvalReport:
    auc: float
    accuracy: float
    n_pristine: int
    n_forgery: int
    mean_region_l1_forgery: float
    type_confusion: list  # rows = true type label 0..4, columns = predicted

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def load_detector(checkpoint):
    params, meta = nn.load_params(checkpoint)
    if meta.get("kind") != "detector":
        raise ValueError(f"{checkpoint} is not a detector checkpoint")
    return Detector.from_config(meta, params)


def _outputs(detector, images, batch_size):
    outs = [detector.forward(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    return (np.concatenate([o.main_logits for o in outs]), np.concatenate([o.region_map.data for o in outs]),
            np.concatenate([o.type_logits for o in outs]))


def evaluate(data, checkpoint, batch_size=64):
    """Score a dataset (manifest path or :class:`FaceDataset`) with a detector.

    ``checkpoint`` is a path or a :class:`Detector`.
    """
    dataset = FaceDataset.from_manifest(data) if isinstance(data, (str, Path)) else data
    detector = load_detector(checkpoint) if isinstance(checkpoint, (str, Path)) else checkpoint
    labels = dataset.labels
    main, region, type_logits = _outputs(detector, dataset.images, batch_size)
    scores = score_forgery(main)
    records = [resolve_record(c, img, head_shape=detector.head_shape, mask=m)
               for c, img, m in zip(dataset.categories, dataset.images, dataset.masks)]
    batch = LabelBatch.from_records(records)
    l1 = np.abs(region - batch.m_gt).mean(axis=(1, 2))
    forg = labels == 1
    confusion = np.zeros((N_TYPE_LABELS, N_TYPE_LABELS), dtype=int)
    np.add.at(confusion, (batch.t_gt, type_logits.argmax(axis=1)), 1)
    return EvalReport(
        auc=auc(forgery_margin(main), labels),
        accuracy=accuracy(scores, labels),
        n_pristine=int((~forg).sum()),
        n_forgery=int(forg.sum()),
        mean_region_l1_forgery=float(l1[forg].mean()) if forg.any() else float("nan"),
        type_confusion=confusion.tolist(),
    )


def synthesized_region_error(detector, dataset, seed=0, n=None, batch_size=64):
    """Mean region-head L1 on forgeries synthesized from ``dataset``'s pristines.

    One uniform (non do-nothing) config per pristine, reference drawn from the
    dataset forgeries.
    """
    rng = np.random.default_rng(seed)
    pristine, forgeries = dataset.pristine_indices, dataset.forgery_indices
    if len(pristine) == 0 or len(forgeries) == 0:
        raise ValueError("need pristines and forgeries to synthesize")
    if n is not None:
        pristine = pristine[:n]
    blends = (BlendType.ALPHA, BlendType.POISSON, BlendType.MIXUP)
    images, records = [], []
    for i in pristine:
        ref = int(rng.choice(forgeries))
        cfg = random_config(rng, blends)
        fake, mask = synthesize(dataset.images[i], dataset.landmarks[i], dataset.images[ref],
                                dataset.landmarks[ref], cfg, rng)
        images.append(fake)
        records.append(resolve_record(PRISTINE, fake, head_shape=detector.head_shape, blend=cfg.blend,
                                      mask=mask, ratio=cfg.ratio))
    images = np.stack(images)
    _, region, _ = _outputs(detector, images, batch_size)
    m_gt = LabelBatch.from_records(records).m_gt
    return float(np.abs(region - m_gt).mean())

