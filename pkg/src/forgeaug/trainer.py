"""Adversarial training: detector descent alternating with REINFORCE ascent on the policy."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import nn
from .blending import synthesize
from .config import N_BLEND_TYPES, BlendType, ForgeryConfig
from .data import derive_seed, manifest_digest
from .detector import Detector
from .geometry import N_REGIONS
from .losses import LossWeights, total_loss
from .policy import RATIO_GRID, SynthesizerPolicy, grid_log_weights, grid_weights, random_config
from .records import DATASET_FORGERY, PRISTINE, LabelBatch, resolve_record

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "L_Main", "L_R", "L_T", "L_A", "total")


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr_detector: float = 2e-4
    lr_policy: float = 5e-5
    alpha: float = 0.1
    mu: float = 0.05
    gamma: float = 0.1
    steps: int = 2000
    seed: int = 0
    augment: str = "adversarial"  # or "random": uniform configs, no policy updates
    checkpoint_every: int = 500
    include_ratio_logp: bool = True
    loss_scope: str = "all"  # or "synthesized": L_b averages synthesized samples only
    baseline: bool = False
    baseline_momentum: float = 0.9
    detector_channels: tuple = (8, 16, 32, 64)
    policy_channels: tuple = (8, 16, 32)
    margin: float = 0.35
    scale: float = 30.0
    ratio_grid: tuple = RATIO_GRID

    def __post_init__(self):
        self.detector_channels = tuple(self.detector_channels)
        self.policy_channels = tuple(self.policy_channels)
        self.ratio_grid = tuple(self.ratio_grid)
        if self.batch_size <= 0 or self.steps < 0:
            raise ValueError("batch_size must be positive and steps nonnegative")
        if self.lr_detector <= 0 or self.lr_policy <= 0:
            raise ValueError("learning rates must be positive")
        if self.augment not in ("adversarial", "random"):
            raise ValueError(f"augment must be 'adversarial' or 'random', got {self.augment!r}")
        if self.loss_scope not in ("all", "synthesized"):
            raise ValueError(f"loss_scope must be 'all' or 'synthesized', got {self.loss_scope!r}")
        LossWeights(self.alpha, self.mu, self.gamma)

    @property
    def weights(self):
        return LossWeights(self.alpha, self.mu, self.gamma)

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


# -------------------------------------------------------------------- batches

@dataclass
class PlanItem:
    source: int
    category: str
    reference: int | None = None
    config: ForgeryConfig | None = None
    policy_row: int | None = None
    seed: int | None = None
    record: object = None


@dataclass
class BatchPlan:
    items: list
    dist: object = None  # batched ConfigDistribution over the policy rows
    policy_configs: list = field(default_factory=list)

    def __len__(self):
        return len(self.items)

    @property
    def images(self):
        return np.stack([it.record.image for it in self.items])

    @property
    def labels(self):
        return LabelBatch.from_records([it.record for it in self.items])

    @property
    def n_policy(self):
        return len(self.policy_configs)

    def synthesized_mask(self):
        return np.array([it.record.category == "synthesized" for it in self.items])


def synthesis_rng(frozen_seed, cfg):
    """Generator that depends only on the config, so a config's loss is a fixed number.

    The ratio only enters for mixup; other blends ignore it.
    """
    ratio = f"{cfg.ratio:.12f}" if cfg.blend == BlendType.MIXUP else "-"
    return np.random.default_rng(derive_seed("frozen", frozen_seed, cfg.region, int(cfg.blend), ratio))


def resolve_item(item, dataset, head_shape, rng=None, synth_kwargs=None):
    """Render (if needed) and label one plan item."""
    image = dataset.images[item.source]
    if item.category == DATASET_FORGERY:
        item.record = resolve_record(DATASET_FORGERY, image, head_shape=head_shape, mask=dataset.masks[item.source])
        return item
    cfg = item.config
    if cfg is None or cfg.blend == BlendType.NONE:
        item.record = resolve_record(PRISTINE, image, head_shape=head_shape)
        return item
    ref = item.reference
    fake, mask = synthesize(image, dataset.landmarks[item.source], dataset.images[ref], dataset.landmarks[ref],
                            cfg, rng, **(synth_kwargs or {}))
    item.record = resolve_record(PRISTINE, fake, head_shape=head_shape, blend=cfg.blend, mask=mask, ratio=cfg.ratio)
    return item


def build_batch(dataset, policy, rng, batch_size=32, augment="adversarial", head_shape=None,
                frozen_synthesis_seed=None, synth_kwargs=None):
    """Draw a batch, sample configs for pristines, render forgeries, assign labels.

    Each pristine gets a reference drawn uniformly from the dataset forgeries.
    Dataset forgeries pass through with their stored masks.
    """
    forgeries = dataset.forgery_indices
    if len(forgeries) == 0:
        raise ValueError("dataset has no forgeries to use as references")
    if head_shape is None:
        head_shape = (dataset.image_size // 16,) * 2
    idx = rng.integers(0, len(dataset), size=batch_size)
    seeds = rng.integers(0, 2 ** 63 - 1, size=batch_size)
    items = [PlanItem(int(i), dataset.categories[i], seed=int(s)) for i, s in zip(idx, seeds)]
    pristine = [it for it in items if it.category == PRISTINE]
    for it, ref in zip(pristine, rng.choice(forgeries, size=len(pristine))):
        it.reference = int(ref)
    plan = BatchPlan(items)
    if pristine:
        if augment == "adversarial":
            src = dataset.images[[it.source for it in pristine]]
            ref = dataset.images[[it.reference for it in pristine]]
            plan.dist = policy.forward(src, ref)
            configs = policy.sample(plan.dist, rng)
        else:
            configs = [random_config(rng) for _ in pristine]
        for row, (it, cfg) in enumerate(zip(pristine, configs)):
            it.config = cfg
            it.policy_row = row
        plan.policy_configs = list(configs)
    for it in items:
        if it.config is not None and frozen_synthesis_seed is not None:
            r = synthesis_rng(frozen_synthesis_seed, it.config)
        else:
            r = np.random.default_rng(it.seed)
        resolve_item(it, dataset, head_shape, r, synth_kwargs)
    return plan


# ---------------------------------------------------------------------- steps

def batch_losses(plan, detector, weights):
    return total_loss(plan.labels, detector.forward(plan.images), weights, detector.am)


def detector_step(plan, detector, opt_state, weights=LossWeights()):
    """One Adam descent step on the mean batch loss; returns the pre-update component means."""
    comps = batch_losses(plan, detector, weights)
    nn.backward(nn.mean(comps.total), detector.params)
    nn.adam_step(detector.params, opt_state, sign=-1)
    return comps.means()


def policy_step(plan, policy, detector, opt_state, weights=LossWeights(), include_ratio=True,
                loss_scope="all", baseline=None):
    """REINFORCE ascent: theta += lr * Adam((1/M) sum_m L_b * grad log p_m).

    ``L_b`` is the batch-mean loss under the current (already updated)
    detector. ``M`` counts every pristine that received a policy config,
    do-nothing included. Returns a dict with ``L_b``, ``M`` and ``skipped``.
    """
    m = plan.n_policy
    if m == 0 or plan.dist is None:
        log.warning("policy step skipped: no policy-configured samples in the batch")
        return {"L_b": float("nan"), "M": 0, "skipped": True}
    comps = batch_losses(plan, detector, weights)
    per_sample = comps.total.data
    if loss_scope == "synthesized":
        sel = plan.synthesized_mask()
        l_b = float(per_sample[sel].mean()) if sel.any() else 0.0
    else:
        l_b = float(per_sample.mean())
    reward = l_b - (baseline if baseline is not None else 0.0)
    logp = policy.log_prob(plan.dist, plan.policy_configs, include_ratio=include_ratio)
    surrogate = nn.tsum(logp) * (reward / m)
    nn.backward(surrogate, policy.params)
    nn.adam_step(policy.params, opt_state, sign=+1)
    return {"L_b": l_b, "M": m, "skipped": False}


# -------------------------------------------------------------------- oracle

def config_loss_table(detector, pair, ratio_grid=RATIO_GRID, weights=LossWeights(), synthesis_seed=0,
                      synth_kwargs=None):
    """Detector loss of every (region, blend, grid ratio) cell, shape (10, 4, G).

    Rendering uses :func:`synthesis_rng`, so the table matches what
    :func:`build_batch` produces with the same ``frozen_synthesis_seed``.
    Non-mixup cells repeat along the ratio axis.
    """
    ip, lm_p, if_, lm_f = pair
    head_shape = detector.head_shape
    g = len(ratio_grid)
    table = np.empty((N_REGIONS, N_BLEND_TYPES, g))
    records, slots = [], []
    records.append(resolve_record(PRISTINE, ip, head_shape=head_shape))
    slots.append(("none",))
    for r in range(N_REGIONS):
        for blend in (BlendType.ALPHA, BlendType.POISSON, BlendType.MIXUP):
            ratios = ratio_grid if blend == BlendType.MIXUP else (ratio_grid[0],)
            for k, a in enumerate(ratios):
                cfg = ForgeryConfig(r, blend, a)
                fake, mask = synthesize(ip, lm_p, if_, lm_f, cfg, synthesis_rng(synthesis_seed, cfg),
                                        **(synth_kwargs or {}))
                records.append(resolve_record(PRISTINE, fake, head_shape=head_shape, blend=blend, mask=mask, ratio=a))
                slots.append((r, int(blend), k))
    losses = np.concatenate([
        total_loss(LabelBatch.from_records(records[i:i + 64]),
                   detector.forward(np.stack([rec.image for rec in records[i:i + 64]])),
                   weights, detector.am).total.data
        for i in range(0, len(records), 64)
    ])
    table[:, BlendType.NONE, :] = losses[0]
    for slot, value in zip(slots[1:], losses[1:]):
        r, b, k = slot
        if b == BlendType.MIXUP:
            table[r, b, k] = value
        else:
            table[r, b, :] = value
    return table


def expected_loss_from_table(dist, table, ratio_grid=RATIO_GRID):
    """sum_r sum_t p(r) p(t) E_ratio[L], ratio expectation over the grid weights."""
    w = grid_weights(float(dist.a_mean), float(dist.a_spread), ratio_grid)[0]
    cell = table[:, :, 0].copy()
    cell[:, BlendType.MIXUP] = table[:, BlendType.MIXUP, :] @ w
    return float(np.asarray(dist.p_region) @ cell @ np.asarray(dist.p_type))


def exact_expected_loss(policy, detector, pair, ratio_grid=RATIO_GRID, weights=LossWeights(),
                        synthesis_seed=0, table=None):
    """Expected detector loss under the policy for one frozen (pristine, reference) pair.

    ``pair`` is ``(ip, lm_p, if_, lm_f)``; pass a precomputed ``table`` to
    skip rendering when only the policy changes.
    """
    if table is None:
        table = config_loss_table(detector, pair, ratio_grid, weights, synthesis_seed)
    dist = policy.forward(pair[0], pair[2])
    return expected_loss_from_table(dist, table, ratio_grid)


def reinforce_gradient_samples(policy, pair, table, n, rng, include_ratio=True):
    """``n`` single-sample score-function gradients ``L(cfg) * grad log p(cfg)``.

    Requires a grid-ratio policy; returns an ``(n, n_params)`` array.
    """
    if policy.ratio_mode != "grid":
        raise ValueError("exact score-function sampling needs ratio_mode='grid'")
    grid = policy.ratio_grid

    def grad_of(select):
        dist = policy.forward(pair[0], pair[2])
        nn.backward(select(dist.graph), policy.params)
        return policy.params.flat_grad()

    g_region = np.stack([grad_of(lambda g, r=r: g["logp_region"][0, r]) for r in range(N_REGIONS)])
    g_type = np.stack([grad_of(lambda g, t=t: g["logp_type"][0, t]) for t in range(N_BLEND_TYPES)])
    g_ratio = np.stack([grad_of(lambda g, k=k: grid_log_weights(g["a_mean"], g["a_spread"], grid)[0, k])
                        for k in range(len(grid))])
    dist = policy.forward(pair[0], pair[2])
    out = np.empty((n, policy.params.n_params()))
    for i in range(n):
        cfg = policy.sample(dist, rng)
        k = int(np.argmin(np.abs(np.asarray(grid) - cfg.ratio)))
        grad = g_region[cfg.region] + g_type[cfg.blend]
        if cfg.blend == BlendType.MIXUP:
            loss = table[cfg.region, cfg.blend, k]
            if include_ratio:
                grad = grad + g_ratio[k]
        else:
            loss = table[cfg.region, cfg.blend, 0]
        out[i] = loss * grad
    return out


def finite_difference_gradient(fn, params, h=1e-5):
    """Central differences of scalar ``fn()`` over every entry of ``params``."""
    theta = params.flat()
    grad = np.empty_like(theta)
    for i in range(theta.size):
        e = theta.copy()
        e[i] += h
        params.set_flat(e)
        up = fn()
        e[i] -= 2 * h
        params.set_flat(e)
        down = fn()
        grad[i] = (up - down) / (2 * h)
    params.set_flat(theta)
    return grad


# ---------------------------------------------------------------------- train

@dataclass
class TrainResult:
    detector: Detector
    policy: SynthesizerPolicy
    history: list
    out_dir: Path | None = None


def _fmt(v):
    return repr(float(v)) if not isinstance(v, int) else str(v)


def save_checkpoint(out_dir, step, detector, policy, opt_steps=None):
    ckpt = Path(out_dir) / "checkpoints"
    ckpt.mkdir(parents=True, exist_ok=True)
    meta_d = dict(detector.config(), step=step)
    meta_p = dict(policy.config(), step=step)
    nn.save_params(ckpt / f"detector_{step:06d}.json", detector.params, meta_d)
    nn.save_params(ckpt / f"policy_{step:06d}.json", policy.params, meta_p)
    nn.save_params(Path(out_dir) / "detector.json", detector.params, meta_d)
    nn.save_params(Path(out_dir) / "policy.json", policy.params, meta_p)


def train(dataset, cfg=None, out_dir=None, manifest_path=None, progress=None):
    """Alternate one detector step and one policy step for ``cfg.steps`` steps.

    With ``out_dir`` set, writes ``metrics.csv``, periodic checkpoints, the
    latest ``detector.json`` / ``policy.json`` and ``train_manifest.json``.
    """
    cfg = cfg or TrainConfig()
    if len(dataset.forgery_indices) == 0 or len(dataset.pristine_indices) == 0:
        raise ValueError("training needs both pristine and forgery samples")
    rng = np.random.default_rng(derive_seed("train", cfg.seed))
    detector = Detector(cfg.detector_channels, dataset.image_size, cfg.margin, cfg.scale,
                        seed=derive_seed("detector", cfg.seed))
    policy = SynthesizerPolicy(cfg.policy_channels, ratio_grid=cfg.ratio_grid, seed=derive_seed("policy", cfg.seed))
    det_opt = nn.OptimizerState(cfg.lr_detector)
    pol_opt = nn.OptimizerState(cfg.lr_policy)
    weights = cfg.weights
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out, 0, detector, policy)
        metrics_file = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(metrics_file, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
    history = []
    baseline = None
    try:
        for step in range(1, cfg.steps + 1):
            plan = build_batch(dataset, policy, rng, cfg.batch_size, cfg.augment, detector.head_shape)
            comps = detector_step(plan, detector, det_opt, weights)
            if not np.isfinite(comps["total"]):
                _dump_nan(out, step, comps, plan)
                raise FloatingPointError(f"non-finite loss at step {step}: {comps}")
            row = {"step": step, **comps}
            if cfg.augment == "adversarial":
                info = policy_step(plan, policy, detector, pol_opt, weights, cfg.include_ratio_logp,
                                   cfg.loss_scope, baseline if cfg.baseline else None)
                if cfg.baseline and not info["skipped"]:
                    b = cfg.baseline_momentum
                    baseline = info["L_b"] if baseline is None else b * baseline + (1 - b) * info["L_b"]
            history.append(row)
            if writer is not None:
                writer.writerow([_fmt(row[c]) if c != "step" else step for c in METRIC_COLUMNS])
                if step % cfg.checkpoint_every == 0 or step == cfg.steps:
                    save_checkpoint(out, step, detector, policy)
            if progress is not None:
                progress(step, row, detector, policy)
    finally:
        if writer is not None:
            metrics_file.close()
    if out is not None:
        doc = {"config": cfg.to_dict(), "seed": cfg.seed, "steps": cfg.steps,
               "detector": detector.config(), "policy": policy.config()}
        if manifest_path is not None:
            doc["dataset_manifest"] = str(manifest_path)
            doc["dataset_sha256"] = manifest_digest(manifest_path)
        (out / "train_manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return TrainResult(detector, policy, history, out)


def _dump_nan(out, step, comps, plan):
    if out is None:
        return
    doc = {"step": step, "components": {k: repr(v) for k, v in comps.items()},
           "samples": [{"source": it.source, "category": it.category,
                        "config": it.config.to_dict() if it.config else None} for it in plan.items]}
    (out / "nan_dump.json").write_text(json.dumps(doc, indent=2) + "\n")
