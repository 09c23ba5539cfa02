"""Single JSON config covering model, training, loss, and data settings."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .experiments import BenchmarkConfig
from .grids import AugmentationConfig, DissectionConfig
from .losses import LossConfig
from .model import ModelConfig
from .synth import SynthRanges
from .train import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    dissect: DissectionConfig = field(default_factory=DissectionConfig)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    synth_ranges: SynthRanges = field(default_factory=SynthRanges)


def _build(cls, payload: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for f in fields(cls):
        if f.name in payload:
            v = payload[f.name]
            kwargs[f.name] = tuple(v) if isinstance(v, list) else v
    return cls(**kwargs)


def load_run_config(path) -> RunConfig:
    with open(path) as fh:
        payload = json.load(fh)
    sections = {
        "model": ModelConfig,
        "train": TrainConfig,
        "loss": LossConfig,
        "dissect": DissectionConfig,
        "augment": AugmentationConfig,
        "benchmark": BenchmarkConfig,
        "synth_ranges": SynthRanges,
    }
    unknown = set(payload) - set(sections)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    kwargs = {
        name: _build(cls, payload[name])
        for name, cls in sections.items()
        if name in payload
    }
    return RunConfig(**kwargs)


def save_run_config(cfg: RunConfig, path):
    with open(path, "w") as fh:
        json.dump(asdict(cfg), fh, indent=2, sort_keys=True)
