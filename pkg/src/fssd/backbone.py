"""Miniature VGG-style feature extractor with the FSSD tap geometry.

Each stage is two 3x3 stride-1 convolutions with ReLU followed by a
ceil-mode 2x2 max-pool. Taps read a stage's pooled output, so with the
default five stages a 300 input yields taps at 75 (conv3_3), 38
(conv4_3), 19 (fc_7) and 10 (conv7_2).
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .tensor_core import Tensor, functional as F
from .tensor_core.layers import Conv2d, Module

DEFAULT_TAPS: Tuple[Tuple[str, int], ...] = (
    ("conv3_3", 1),
    ("conv4_3", 2),
    ("fc_7", 3),
    ("conv7_2", 4),
)


@dataclass
class BackboneConfig:
    input_size: int = 300
    stage_channels: Tuple[int, ...] = (16, 32, 64, 128, 128)
    taps: Tuple[Tuple[str, int], ...] = DEFAULT_TAPS

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.taps = tuple((str(n), int(i)) for n, i in self.taps)
        if self.input_size < 1:
            raise ValueError("input_size must be positive")
        if any(c < 1 for c in self.stage_channels):
            raise ValueError(f"zero-width stage in {self.stage_channels}")
        names = [n for n, _ in self.taps]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate tap names: {names}")
        for name, idx in self.taps:
            if not 0 <= idx < len(self.stage_channels):
                raise ValueError(f"tap {name!r} references missing stage {idx}")
        stages = [i for _, i in self.taps]
        if stages != sorted(set(stages)):
            raise ValueError("taps must reference strictly increasing stages")

    @classmethod
    def preset(cls, name: str, input_size: int = 300) -> "BackboneConfig":
        if name == "desk":
            return cls(input_size=input_size)
        if name == "vgg-like":
            return cls(input_size=input_size, stage_channels=(64, 128, 256, 512, 1024))
        raise ValueError(f"unknown backbone preset {name!r}")

    def stage_sizes(self) -> List[int]:
        """Spatial size after each stage's pool."""
        sizes, s = [], self.input_size
        for _ in self.stage_channels:
            s = F.output_size(s, 2, 2, 0, ceil_mode=True)
            sizes.append(s)
        return sizes

    def tap_sizes(self) -> Dict[str, int]:
        sizes = self.stage_sizes()
        return {name: sizes[idx] for name, idx in self.taps}

    def tap_channels(self) -> Dict[str, int]:
        return {name: self.stage_channels[idx] for name, idx in self.taps}


@dataclass
class FeatureMapSet:
    """Ordered tap name -> feature map, with the stride of each map."""

    maps: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)
    strides: Dict[str, int] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.maps[name]

    def __contains__(self, name: str) -> bool:
        return name in self.maps

    def names(self) -> List[str]:
        return list(self.maps)

    def sizes(self) -> Dict[str, int]:
        return {k: v.shape[2] for k, v in self.maps.items()}


class Stage(Module):
    def __init__(self, in_c: int, out_c: int, rng: np.random.Generator, dtype):
        super().__init__()
        self.conv0 = Conv2d(in_c, out_c, 3, rng, dtype=dtype)
        self.conv1 = Conv2d(out_c, out_c, 3, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        x = F.relu(self.conv0(x))
        x = F.relu(self.conv1(x))
        return F.max_pool2d(x, 2, 2, ceil_mode=True)


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        widths = (3,) + cfg.stage_channels
        last_tap = max(i for _, i in cfg.taps)
        self.stages = [Stage(widths[i], widths[i + 1], rng, dtype) for i in range(last_tap + 1)]

    def __call__(self, image: Tensor) -> FeatureMapSet:
        return forward(self, image)


def build_backbone(cfg: BackboneConfig, rng_seed: int = 0, dtype=np.float64) -> Backbone:
    return Backbone(cfg, np.random.default_rng(rng_seed), dtype)


def forward(b: Backbone, image: Tensor) -> FeatureMapSet:
    cfg = b.cfg
    if image.ndim != 4 or image.shape[1] != 3:
        raise ValueError(f"backbone expects (N, 3, H, W) images, got {image.shape}")
    if image.shape[2:] != (cfg.input_size, cfg.input_size):
        raise ValueError(f"image size {image.shape[2:]} != configured input size {cfg.input_size}")
    tap_at = {idx: name for name, idx in cfg.taps}
    out = FeatureMapSet()
    x = image
    for i, stage in enumerate(b.stages):
        x = stage(x)
        if i in tap_at:
            out.maps[tap_at[i]] = x
            out.strides[tap_at[i]] = 2 ** (i + 1)
    return out

