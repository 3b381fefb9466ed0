"""Forgery configuration types shared by the policy, renderer and trainer."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

from .geometry import N_REGIONS


class BlendType(enum.IntEnum):
    ALPHA = 0
    POISSON = 1
    MIXUP = 2
    NONE = 3  # do-nothing: the pristine goes through untouched

    @classmethod
    def parse(cls, value):
        if isinstance(value, str):
            key = value.strip().upper().replace("-", "_")
            aliases = {"DO_NOTHING": "NONE", "NOTHING": "NONE"}
            key = aliases.get(key, key)
            if key in cls.__members__:
                return cls[key]
            if key.isdigit():
                value = int(key)
            else:
                raise ValueError(f"unknown blend type {value!r}")
        try:
            return cls(int(value))
        except ValueError:
            raise ValueError(f"blend type must be in 0..3, got {value!r}") from None


N_BLEND_TYPES = len(BlendType)

# detector type-head labels: 0-2 synthesized blend, 3 pristine, 4 dataset forgery
TYPE_PRISTINE = 3
TYPE_DATASET_FORGERY = 4
N_TYPE_LABELS = 5


@dataclass(frozen=True)
class ForgeryConfig:
    """One sampled (region, blend, ratio) triple and its log-probabilities."""

    region: int
    blend: BlendType
    ratio: float = 0.5
    logp_region: float = 0.0
    logp_type: float = 0.0
    logp_ratio: float = 0.0

    def __post_init__(self):
        if not 0 <= int(self.region) < N_REGIONS:
            raise ValueError(f"region must be in 0..9, got {self.region}")
        object.__setattr__(self, "region", int(self.region))
        object.__setattr__(self, "blend", BlendType.parse(self.blend))
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"ratio must be in [0, 1], got {self.ratio}")
        object.__setattr__(self, "ratio", float(self.ratio))

    def to_dict(self):
        d = asdict(self)
        d["blend"] = self.blend.name.lower()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in ("region", "blend", "ratio", "logp_region", "logp_type", "logp_ratio") if k in d})
