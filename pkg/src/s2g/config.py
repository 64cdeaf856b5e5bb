"""Run configuration; defaults are the published training setup."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

PATH_KEYS = ("data", "registry", "kg", "checkpoint", "metrics")


@dataclass
class RunConfig:
    emb_dim: int = 128
    hidden_dim: int = 512
    dropout: float = 0.5
    batch: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-5
    lr_halve_every: int = 20
    beam: int = 5
    max_nodes: int = 50
    slots: int = 10
    epochs: int = 80
    seed: int = 0
    clip_norm: float = 5.0
    min_freq: int = 1
    eval_every: int = 1
    paths: dict = field(default_factory=dict)

    def __post_init__(self):
        self.paths = {**dict.fromkeys(PATH_KEYS), **self.paths}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("paths", "dropout", "weight_decay", "seed"):
                continue
            if not v > 0:
                raise ValueError(f"{f.name} must be positive, got {v!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def replace(self, **overrides) -> "RunConfig":
        data = self.to_dict()
        data.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig.from_dict(data)
