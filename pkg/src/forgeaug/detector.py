"""Multi-head forgery detector."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .config import N_TYPE_LABELS
from .losses import DEFAULT_MARGIN, DEFAULT_SCALE, AmSoftmaxParams, cosine_logits

REGION_PRIOR = 0.05  # initial per-cell forged probability


@dataclass
class DetectorOutput:
    """Head outputs for a batch (leading axis N).

    ``main_cos`` / ``type_cos`` are AM-Softmax cosines; the logits are these
    scaled by the AM-Softmax scale.
    """

    main_cos: nn.Tensor  # (N, 2)
    region_map: nn.Tensor  # (N, H/16, W/16), in [0, 1]
    type_cos: nn.Tensor  # (N, 5)
    ratio: nn.Tensor  # (N,), in [0, 1]
    scale: float = DEFAULT_SCALE

    @property
    def main_logits(self):
        return self.scale * self.main_cos.data

    @property
    def type_logits(self):
        return self.scale * self.type_cos.data

    def __len__(self):
        return self.main_cos.shape[0]

    def row(self, i):
        """Plain arrays for sample ``i``: shapes (2,), (h, w), (5,), ()."""
        return {
            "main_logits": self.main_logits[i],
            "region_map": self.region_map.data[i],
            "type_logits": self.type_logits[i],
            "ratio": self.ratio.data[i],
        }


def score_forgery(main_logits):
    """Softmax probability of the forgery class."""
    z = np.asarray(main_logits, dtype=np.float64)
    return nn.softmax(z, axis=-1)[..., 1]


def forgery_margin(main_logits):
    """Logit of :func:`score_forgery`, ``z_forgery - z_pristine``.

    Same ordering as the probability, but it keeps resolving once the
    probability has rounded to 1.0, so rank metrics should use it.
    """
    z = np.asarray(main_logits, dtype=np.float64)
    return z[..., 1] - z[..., 0]


class Detector:
    """Shared conv backbone (stride 16) with main, region, type and ratio heads.

    The main head starts with both class vectors equal, so an untrained
    detector scores every input 0.5. The region head's bias starts at the
    logit of ``region_prior``: most cells are untouched, and at small
    learning rates a bias starting from 0 takes thousands of steps to get there.
    """

    def __init__(self, channels=(8, 16, 32, 64), image_size=64, margin=DEFAULT_MARGIN,
                 scale=DEFAULT_SCALE, seed=0, region_prior=REGION_PRIOR):
        self.channels = tuple(channels)
        self.image_size = int(image_size)
        self.am = AmSoftmaxParams(margin, scale)
        self.seed = seed
        if not 0.0 < region_prior < 1.0:
            raise ValueError(f"region_prior must lie in (0, 1), got {region_prior}")
        self.region_prior = float(region_prior)
        self.backbone = nn.ConvBackbone(3, self.channels, linear_output=True)
        if self.image_size % self.backbone.reduction:
            raise ValueError(f"image size {image_size} is not divisible by {self.backbone.reduction}")
        self.params = nn.ParamStore()
        rng = np.random.default_rng(seed)
        self.backbone.init(self.params, "det", rng)
        c = self.channels[-1]
        self.params.add("det.region.w", rng.normal(0.0, 1.0 / np.sqrt(c), size=(1, 1, c, 1)))
        self.params.add("det.region.b", np.array([np.log(region_prior / (1.0 - region_prior))]))
        # cosine heads are scale free, so the init scale only sets how fast Adam can rotate them
        shared = rng.normal(0.0, 1.0 / np.sqrt(c), size=(c, 1))
        self.params.add("det.main.w", np.repeat(shared, 2, axis=1))
        self.params.add("det.type.w", rng.normal(0.0, 1.0 / np.sqrt(c), size=(c, N_TYPE_LABELS)))
        self.params.add("det.ratio.w", rng.normal(0.0, 1.0 / np.sqrt(c), size=(c, 1)))
        self.params.add("det.ratio.b", np.zeros(1))

    @property
    def head_shape(self):
        side = self.image_size // self.backbone.reduction
        return (side, side)

    def config(self):
        return {"kind": "detector", "channels": list(self.channels), "image_size": self.image_size,
                "margin": self.am.margin, "scale": self.am.scale, "seed": self.seed,
                "region_prior": self.region_prior}

    @classmethod
    def from_config(cls, cfg, params=None):
        det = cls(channels=cfg["channels"], image_size=cfg["image_size"], margin=cfg.get("margin", DEFAULT_MARGIN),
                  scale=cfg.get("scale", DEFAULT_SCALE), seed=cfg.get("seed", 0),
                  region_prior=cfg.get("region_prior", REGION_PRIOR))
        if params is not None:
            det.load_params(params)
        return det

    def load_params(self, params):
        if set(params) != set(self.params):
            raise ValueError("checkpoint parameters do not match the detector architecture")
        for name, p in params.items():
            if p.data.shape != self.params[name].data.shape:
                raise ValueError(f"parameter {name!r} has shape {p.data.shape}, expected {self.params[name].data.shape}")
            self.params[name].data = p.data.copy()

    def forward(self, images):
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1:] != (self.image_size, self.image_size, 3):
            raise ValueError(f"detector expects (N, {self.image_size}, {self.image_size}, 3) images, got {x.shape}")
        p = self.params
        fmap = self.backbone(p, "det", 2.0 * x - 1.0)  # pixels to [-1, 1]
        region = nn.sigmoid(nn.conv2d(fmap, p["det.region.w"], p["det.region.b"], padding="valid"))
        region = nn.reshape(region, region.shape[:3])
        feat = nn.global_avg_pool(fmap)
        main_cos = cosine_logits(feat, p["det.main.w"])
        type_cos = cosine_logits(feat, p["det.type.w"])
        ratio = nn.sigmoid(nn.linear(feat, p["det.ratio.w"], p["det.ratio.b"]))[:, 0]
        return DetectorOutput(main_cos, region, type_cos, ratio, scale=self.am.scale)

    __call__ = forward

    def score(self, images, batch_size=64):
        """Forgery probabilities, evaluated in chunks."""
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        return np.concatenate([score_forgery(self.forward(x[i:i + batch_size]).main_logits)
                               for i in range(0, len(x), batch_size)])


def detector_forward(img, detector):
    """Forward one image; returns the unbatched head outputs."""
    out = detector.forward(img)
    return out.row(0) if np.asarray(img).ndim == 3 else out
