"""Synthesizer policy: maps a (pristine, reference) pair to forgery-config distributions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from . import nn
from .config import N_BLEND_TYPES, BlendType, ForgeryConfig
from .geometry import N_REGIONS

RATIO_GRID = tuple(np.round(np.arange(1, 10) / 10.0, 10))
SPREAD_FLOOR = 0.05
_SQRT2 = np.sqrt(2.0)


@dataclass
class ConfigDistribution:
    """Per-pair distributions; arrays carry a leading batch axis when batched.

    ``graph`` holds the differentiable tensors behind the arrays (``None``
    for hand-built distributions).
    """

    p_region: np.ndarray
    p_type: np.ndarray
    a_mean: np.ndarray
    a_spread: np.ndarray
    graph: dict | None = None

    def __post_init__(self):
        self.p_region = np.asarray(self.p_region, dtype=np.float64)
        self.p_type = np.asarray(self.p_type, dtype=np.float64)
        self.a_mean = np.asarray(self.a_mean, dtype=np.float64)
        self.a_spread = np.asarray(self.a_spread, dtype=np.float64)
        if self.p_region.shape[-1] != N_REGIONS or self.p_type.shape[-1] != N_BLEND_TYPES:
            raise ValueError("distribution must cover 10 regions and 4 blend types")
        for name in ("p_region", "p_type"):
            p = getattr(self, name)
            if p.min() < 0 or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-9):
                raise ValueError(f"{name} is not a probability simplex")
        if np.any(self.a_mean < 0) or np.any(self.a_mean > 1) or np.any(self.a_spread <= 0):
            raise ValueError("ratio mean must lie in [0, 1] and spread must be positive")

    @property
    def batched(self):
        return self.p_region.ndim == 2

    def __len__(self):
        return self.p_region.shape[0] if self.batched else 1

    def row(self, i):
        if not self.batched:
            return self
        return ConfigDistribution(self.p_region[i], self.p_type[i], self.a_mean[i], self.a_spread[i])


# ----------------------------------------------------------- ratio densities

def _std_normal_cdf(z):
    return 0.5 * (1.0 + nn.erf(z * (1.0 / _SQRT2)))


def truncated_normal_logpdf(a, mean, spread):
    """Differentiable log-density of N(mean, spread^2) truncated to [0, 1]."""
    z = (a - mean) / spread
    mass = _std_normal_cdf((1.0 - mean) / spread) - _std_normal_cdf((0.0 - mean) / spread)
    return -0.5 * nn.square(z) - 0.5 * np.log(2 * np.pi) - nn.log(spread) - nn.log(mass)


def grid_log_weights(mean, spread, grid=RATIO_GRID):
    """Log-probabilities of the grid points under the truncated Gaussian, shape (N, G).

    The truncation constant cancels after normalisation over the grid.
    """
    g = np.asarray(grid, dtype=np.float64)[None, :]
    mean = nn.reshape(nn.as_tensor(mean), (-1, 1))
    spread = nn.reshape(nn.as_tensor(spread), (-1, 1))
    return nn.log_softmax(-0.5 * nn.square((g - mean) / spread), axis=-1)


def grid_weights(mean, spread, grid=RATIO_GRID):
    return np.exp(grid_log_weights(np.atleast_1d(mean), np.atleast_1d(spread), grid).data)


# ------------------------------------------------------------------- policy

class SynthesizerPolicy:
    """Conv backbone on the 6-channel (pristine, reference) stack + three heads.

    ``ratio_mode="gaussian"`` samples the mixup ratio from a truncated
    Gaussian; ``"grid"`` samples it from ``ratio_grid`` with the Gaussian's
    normalised weights, which makes expectations finite sums.
    """

    def __init__(self, channels=(8, 16, 32), ratio_mode="gaussian", ratio_grid=RATIO_GRID,
                 spread_floor=SPREAD_FLOOR, seed=0):
        if ratio_mode not in ("gaussian", "grid"):
            raise ValueError(f"ratio_mode must be 'gaussian' or 'grid', got {ratio_mode!r}")
        self.channels = tuple(channels)
        self.ratio_mode = ratio_mode
        self.ratio_grid = tuple(float(a) for a in ratio_grid)
        self.spread_floor = spread_floor
        self.seed = seed
        self.backbone = nn.ConvBackbone(6, self.channels)
        self.params = nn.ParamStore()
        rng = np.random.default_rng(seed)
        self.backbone.init(self.params, "policy", rng)
        c = self.channels[-1]
        for head, k in (("region", N_REGIONS), ("type", N_BLEND_TYPES), ("ratio", 2)):
            self.params.add(f"policy.{head}.w", rng.normal(0.0, 1.0 / np.sqrt(c), size=(c, k)))
            self.params.add(f"policy.{head}.b", np.zeros(k))

    def config(self):
        return {"kind": "policy", "channels": list(self.channels), "ratio_mode": self.ratio_mode,
                "ratio_grid": list(self.ratio_grid), "spread_floor": self.spread_floor, "seed": self.seed}

    @classmethod
    def from_config(cls, cfg, params=None):
        policy = cls(channels=cfg["channels"], ratio_mode=cfg.get("ratio_mode", "gaussian"),
                     ratio_grid=cfg.get("ratio_grid", RATIO_GRID),
                     spread_floor=cfg.get("spread_floor", SPREAD_FLOOR), seed=cfg.get("seed", 0))
        if params is not None:
            policy.load_params(params)
        return policy

    def load_params(self, params):
        if set(params) != set(self.params):
            raise ValueError("checkpoint parameters do not match the policy architecture")
        for name, p in params.items():
            if p.data.shape != self.params[name].data.shape:
                raise ValueError(f"parameter {name!r} has shape {p.data.shape}, expected {self.params[name].data.shape}")
            self.params[name].data = p.data.copy()

    def zero_heads(self):
        for head in ("region", "type", "ratio"):
            self.params[f"policy.{head}.w"].data[:] = 0.0
            self.params[f"policy.{head}.b"].data[:] = 0.0

    def forward(self, ip, if_):
        """Distributions for one pair ``(H, W, 3)`` or a batch ``(N, H, W, 3)``."""
        ip = np.asarray(ip, dtype=np.float64)
        if_ = np.asarray(if_, dtype=np.float64)
        if ip.shape != if_.shape:
            raise ValueError(f"pristine {ip.shape} and reference {if_.shape} shapes differ")
        single = ip.ndim == 3
        if single:
            ip, if_ = ip[None], if_[None]
        if ip.ndim != 4 or ip.shape[-1] != 3:
            raise ValueError(f"images must be (N, H, W, 3), got {ip.shape}")
        p = self.params
        x = np.concatenate([ip, if_], axis=-1)
        feat = nn.global_avg_pool(self.backbone(p, "policy", x))
        logp_region = nn.log_softmax(nn.linear(feat, p["policy.region.w"], p["policy.region.b"]))
        logp_type = nn.log_softmax(nn.linear(feat, p["policy.type.w"], p["policy.type.b"]))
        raw = nn.linear(feat, p["policy.ratio.w"], p["policy.ratio.b"])
        a_mean = nn.sigmoid(raw[:, 0])
        a_spread = nn.softplus(raw[:, 1]) + self.spread_floor
        graph = {"logp_region": logp_region, "logp_type": logp_type, "a_mean": a_mean, "a_spread": a_spread}
        dist = ConfigDistribution(np.exp(logp_region.data), np.exp(logp_type.data),
                                  a_mean.data.copy(), a_spread.data.copy(), graph=graph)
        if single:
            return ConfigDistribution(dist.p_region[0], dist.p_type[0], dist.a_mean[0], dist.a_spread[0], graph=graph)
        return dist

    __call__ = forward

    def sample(self, dist, rng):
        """Sample one config per row of ``dist`` (a single config if unbatched)."""
        if not dist.batched:
            return sample_config(dist, rng, self.ratio_mode, self.ratio_grid)
        return [sample_config(dist.row(i), rng, self.ratio_mode, self.ratio_grid) for i in range(len(dist))]

    def log_prob(self, dist, configs, include_ratio=True):
        """Differentiable ``log p(region) + log p(type) [+ log p(ratio) for mixup]`` per row."""
        if dist.graph is None:
            raise ValueError("distribution carries no graph; call forward() first")
        if isinstance(configs, ForgeryConfig):
            configs = [configs]
        g = dist.graph
        rows = np.arange(len(configs))
        regions = np.array([c.region for c in configs])
        blends = np.array([int(c.blend) for c in configs])
        total = g["logp_region"][rows, regions] + g["logp_type"][rows, blends]
        mix = blends == BlendType.MIXUP
        if include_ratio and mix.any():
            mix_rows = rows[mix]
            ratios = np.array([configs[i].ratio for i in mix_rows])
            if self.ratio_mode == "grid":
                k = np.array([_grid_index(a, self.ratio_grid) for a in ratios])
                lw = grid_log_weights(g["a_mean"][mix_rows], g["a_spread"][mix_rows], self.ratio_grid)
                lr = lw[np.arange(len(k)), k]
            else:
                lr = truncated_normal_logpdf(ratios, g["a_mean"][mix_rows], g["a_spread"][mix_rows])
            gate = np.zeros((len(configs), len(mix_rows)))
            gate[mix_rows, np.arange(len(mix_rows))] = 1.0
            total = total + nn.matmul(gate, nn.reshape(lr, (-1, 1)))[:, 0]
        return total


def _grid_index(a, grid):
    k = int(np.argmin(np.abs(np.asarray(grid) - a)))
    if abs(grid[k] - a) > 1e-9:
        raise ValueError(f"ratio {a} is not on the ratio grid")
    return k


def policy_forward(ip, if_, policy):
    return policy.forward(ip, if_)


def sample_config(dist, rng, ratio_mode="gaussian", ratio_grid=RATIO_GRID):
    """Draw (region, blend, ratio) from an unbatched distribution.

    ``logp_ratio`` is 0 unless the blend is mixup.
    """
    region = int(rng.choice(N_REGIONS, p=dist.p_region))
    blend = int(rng.choice(N_BLEND_TYPES, p=dist.p_type))
    mean, spread = float(dist.a_mean), float(dist.a_spread)
    if ratio_mode == "grid":
        w = grid_weights(mean, spread, ratio_grid)[0]
        k = int(rng.choice(len(ratio_grid), p=w))
        ratio, logp_ratio = float(ratio_grid[k]), float(np.log(w[k]))
    else:
        lo, hi = ndtr(-mean / spread), ndtr((1.0 - mean) / spread)
        ratio = float(np.clip(mean + spread * ndtri(rng.uniform(lo, hi)), 0.0, 1.0))
        logp_ratio = float(truncated_normal_logpdf(ratio, mean, spread).data)
    with np.errstate(divide="ignore"):
        logp_region = float(np.log(dist.p_region[region]))
        logp_type = float(np.log(dist.p_type[blend]))
    if blend != BlendType.MIXUP:
        logp_ratio = 0.0
    return ForgeryConfig(region, BlendType(blend), ratio, logp_region, logp_type, logp_ratio)


def random_config(rng, blends=tuple(BlendType)):
    """Uniform config (the non-adversarial baseline)."""
    region = int(rng.integers(N_REGIONS))
    blend = BlendType(int(rng.choice([int(b) for b in blends])))
    return ForgeryConfig(region, blend, float(rng.uniform(0.0, 1.0)))


def logprob_sum(cfg, include_ratio=True):
    total = cfg.logp_region + cfg.logp_type
    if include_ratio and cfg.blend == BlendType.MIXUP:
        total += cfg.logp_ratio
    return total
