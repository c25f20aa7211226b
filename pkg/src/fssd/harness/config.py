"""JSON experiment configuration (backbone.*, fusion.*, priors.*, model.*, data.*, train.*, eval.*)."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Tuple

from ..model import ModelConfig
from .shapeworld import ShapeWorldSpec


@dataclass
class DataConfig:
    spec: ShapeWorldSpec = field(default_factory=ShapeWorldSpec)
    train_images: int = 500
    test_images: int = 100
    dir: Optional[str] = None  # read images from a gen-data directory instead

    def to_dict(self) -> dict:
        d = self.spec.to_dict()
        d.pop("num_images")
        d.update(train_images=self.train_images, test_images=self.test_images)
        if self.dir is not None:
            d["dir"] = self.dir
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        d = dict(d)
        train = int(d.pop("train_images", 500))
        test = int(d.pop("test_images", 100))
        directory = d.pop("dir", None)
        d["num_images"] = train + test
        return cls(ShapeWorldSpec.from_dict(d), train, test, directory)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    iterations: int = 2000
    lr_steps: Tuple[int, ...] = (1500,)
    lr_gamma: float = 0.1
    batch_size: int = 8
    fusion_lr_multiplier: float = 2.0
    seed: int = 0
    init_checkpoint: Optional[str] = None
    flip: bool = True
    warmup_iterations: int = 0
    warm_start_iterations: Optional[int] = None  # budget when starting from a checkpoint; None = half

    def __post_init__(self):
        self.lr_steps = tuple(int(s) for s in self.lr_steps)
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("learning rate, momentum and weight decay must be non-negative")
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("batch_size must be >= 1 and iterations >= 0")
        if self.fusion_lr_multiplier <= 0:
            raise ValueError("fusion_lr_multiplier must be positive")

    def warm_start(self) -> "TrainConfig":
        """Schedule for a run initialized from a checkpoint: shorter budget, proportional lr steps."""
        n = self.warm_start_iterations if self.warm_start_iterations is not None else self.iterations // 2
        frac = n / self.iterations if self.iterations else 0.0
        return replace(
            self,
            iterations=n,
            lr_steps=tuple(int(round(s * frac)) for s in self.lr_steps),
            warmup_iterations=min(self.warmup_iterations, n),
        )

    def lr_at(self, step: int) -> float:
        lr = self.lr * self.lr_gamma ** sum(step >= s for s in self.lr_steps)
        if self.warmup_iterations and step < self.warmup_iterations:
            lr *= (step + 1) / self.warmup_iterations
        return lr


@dataclass
class EvalConfig:
    conf_threshold: float = 0.01
    nms_iou: float = 0.45
    top_k_per_class: int = 200
    max_total: int = 200
    iou_threshold: float = 0.5
    eleven_point: bool = False
    small_side_px: int = 32
    batch_size: int = 8


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        d = self.model.to_dict()
        d["data"] = self.data.to_dict()
        t = asdict(self.train)
        t["lr_steps"] = list(self.train.lr_steps)
        d["train"] = t
        d["eval"] = asdict(self.eval)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {"backbone", "fusion", "priors", "model", "data", "train", "eval"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config sections {sorted(unknown)}")
        return cls(
            model=ModelConfig.from_dict(d),
            data=DataConfig.from_dict(d.get("data", {})),
            train=TrainConfig(**d.get("train", {})),
            eval=EvalConfig(**d.get("eval", {})),
        )

    def replace(self, overrides: dict) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. {"fusion.fusion_op": "sum"}."""
        d = copy.deepcopy(self.to_dict())
        for key, value in overrides.items():
            section, _, name = key.partition(".")
            d.setdefault(section, {})[name] = value
        return ExperimentConfig.from_dict(d)


def canonical_json(d: dict) -> str:
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


def model_hash(cfg: ModelConfig) -> str:
    return hashlib.sha256(canonical_json(cfg.to_dict()).encode()).hexdigest()


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
