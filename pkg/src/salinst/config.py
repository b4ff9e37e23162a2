"""Run configuration: one serializable tree covering every stage.

Configs load from JSON; unknown keys are rejected so typos fail loudly.
Defaults follow the training protocol (alpha 1/3, 20 proposals, lr 0.004
dropped 10x at the half-run mark, momentum 0.9, weight decay 1e-4) at
desk scale (64x64 images, 2000 steps).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import SynthConfig
from .detector import BackboneConfig
from .model import InferConfig
from .roimask import MaskConfig
from .segbranch import SegBranchConfig


@dataclass
class TrainConfig:
    steps: int = 2000
    learning_rate: float = 0.004
    lr_drop_step: int = 1000    # divided by 10 from this step on
    lr_drop_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    clip_norm: float = 5.0      # global gradient-norm ceiling; 0 disables
    hflip_prob: float = 0.5
    seed: int = 0
    log_every: int = 50


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    seg: SegBranchConfig = field(default_factory=SegBranchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)


def _build(cls, payload: dict, path: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(payload) - set(fields)
    if unknown:
        raise ValueError(f"config{path}: unknown keys {sorted(unknown)}; "
                         f"expected a subset of {sorted(fields)}")
    kwargs = {}
    for key, value in payload.items():
        ftype = fields[key].type
        if isinstance(value, dict):
            kwargs[key] = _build(_NESTED[key], value, f"{path}.{key}")
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


_NESTED = {"synth": SynthConfig, "backbone": BackboneConfig, "mask": MaskConfig,
           "seg": SegBranchConfig, "train": TrainConfig, "infer": InferConfig}


def config_from_dict(payload: dict) -> RunConfig:
    return _build(RunConfig, payload, "")


def config_load(path) -> RunConfig:
    with open(path) as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: not valid JSON: {e}") from e
    return config_from_dict(payload)


def config_dump(config: RunConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(dataclasses.asdict(config), f, indent=2)
        f.write("\n")
