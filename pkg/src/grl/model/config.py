"""GRL network configuration (JSON round-trippable)."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from ..attention import MEASURES, AnchorSpec, StripeSpec, WindowSpec

TASKS = {"denoise": 1, "sr_x2": 2, "sr_x4": 4}


@dataclass(frozen=True)
class GRLConfig:
    embed_dim: int = 16
    stages: int = 2
    layers_per_stage: int = 2
    window: WindowSpec = field(default_factory=WindowSpec)
    stripe: StripeSpec = field(default_factory=StripeSpec)
    anchor: AnchorSpec = field(default_factory=AnchorSpec)
    heads: int = 2
    mlp_ratio: float = 2.0
    measure: str = "dot"
    task: str = "denoise"
    channels_in: int = 1
    ca_squeeze: int = 4

    def __post_init__(self):
        c = self.embed_dim
        if c < 2 or c % 2:
            raise ValueError(f"embed_dim must be even, got {c}")
        if self.heads < 1 or (c // 2) % self.heads:
            raise ValueError(f"heads={self.heads} must divide embed_dim/2={c // 2}")
        if self.measure not in MEASURES:
            raise ValueError(f"unknown measure {self.measure!r}")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {sorted(TASKS)}")
        if self.channels_in not in (1, 3):
            raise ValueError("channels_in must be 1 or 3")
        if self.stages < 1 or self.layers_per_stage < 1:
            raise ValueError("need at least one stage and one layer")
        if c % self.ca_squeeze or c // self.ca_squeeze < 1:
            raise ValueError(f"ca_squeeze {self.ca_squeeze} must divide embed_dim {c}")
        if self.mlp_ratio <= 0 or int(round(c * self.mlp_ratio)) < 1:
            raise ValueError("mlp_ratio must give a positive hidden width")

    @property
    def scale(self):
        return TASKS[self.task]

    @property
    def mlp_hidden(self):
        return int(round(self.embed_dim * self.mlp_ratio))

    @property
    def n_layers(self):
        return self.stages * self.layers_per_stage

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "window" in d:
            d["window"] = WindowSpec(**d["window"])
        if "stripe" in d:
            d["stripe"] = StripeSpec(**d["stripe"])
        if "anchor" in d:
            d["anchor"] = AnchorSpec(**d["anchor"])
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)
