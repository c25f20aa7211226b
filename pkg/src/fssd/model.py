"""Backbone + fusion + pyramid + multibox head as one trainable module."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .backbone import Backbone, BackboneConfig
from .fusion import FusionConfig, FusionModule, FusionOp, Pyramid, pyramid_sizes
from .multibox.head import MultiboxHead
from .multibox.priors import PriorBoxSet, PriorSpec, build_specs, default_ratios, generate_priors
from .tensor_core import Tensor
from .tensor_core.layers import Module

DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class PriorConfig:
    first_scale: Optional[float] = None
    min_scale: Optional[float] = None
    max_scale: Optional[float] = None
    six_box_levels: Optional[Tuple[int, ...]] = None
    variances: Tuple[float, float, float, float] = (0.1, 0.1, 0.2, 0.2)
    match_iou: float = 0.5
    neg_ratio: float = 3.0

    def resolved(self, input_size: int, levels: int) -> "PriorConfig":
        """Fill unset fields with the SSD300 / SSD512 conventions."""
        if input_size >= 512:
            first, lo, hi = 0.07, 0.15, 0.9
        else:
            first, lo, hi = 0.1, 0.2, 0.9
        six = tuple(range(1, max(1, levels - 2)))
        return PriorConfig(
            first_scale=first if self.first_scale is None else self.first_scale,
            min_scale=lo if self.min_scale is None else self.min_scale,
            max_scale=hi if self.max_scale is None else self.max_scale,
            six_box_levels=six if self.six_box_levels is None else tuple(self.six_box_levels),
            variances=tuple(self.variances),
            match_iou=self.match_iou,
            neg_ratio=self.neg_ratio,
        )

    def specs(self, sizes: List[int], input_size: int) -> List[PriorSpec]:
        r = self.resolved(input_size, len(sizes))
        return build_specs(sizes, default_ratios(len(sizes), r.six_box_levels), r.first_scale, r.min_scale, r.max_scale)


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    priors: PriorConfig = field(default_factory=PriorConfig)
    num_classes: int = 4  # including background
    dtype: str = "float64"

    def level_sizes(self) -> List[int]:
        taps = self.backbone.tap_sizes()
        f = self.fusion
        if f.fusion_op is FusionOp.NONE:
            given = [taps[n] for n in f.source_layers]
            return given + pyramid_sizes(given[-1], f.num_levels - len(given) + 1)[1:]
        return pyramid_sizes(taps[f.base_layer], f.num_levels)

    def prior_specs(self) -> List[PriorSpec]:
        return self.priors.specs(self.level_sizes(), self.backbone.input_size)

    def to_dict(self) -> dict:
        return {
            "backbone": {
                "input_size": self.backbone.input_size,
                "stage_channels": list(self.backbone.stage_channels),
                "taps": [list(t) for t in self.backbone.taps],
            },
            "fusion": self.fusion.to_dict(),
            "priors": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.priors).items()},
            "model": {"num_classes": self.num_classes, "dtype": self.dtype},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        b = dict(d.get("backbone", {}))
        if "taps" in b:
            b["taps"] = tuple(tuple(t) for t in b["taps"])
        p = dict(d.get("priors", {}))
        for key in ("six_box_levels", "variances"):
            if p.get(key) is not None:
                p[key] = tuple(p[key])
        m = d.get("model", {})
        return cls(
            backbone=BackboneConfig(**b),
            fusion=FusionConfig.from_dict(d.get("fusion", {})),
            priors=PriorConfig(**p),
            num_classes=int(m.get("num_classes", 4)),
            dtype=str(m.get("dtype", "float64")),
        )


def _used_backbone(cfg: ModelConfig) -> BackboneConfig:
    # stages past the deepest consumed tap would get no gradient
    used = set(cfg.fusion.source_layers)
    if cfg.fusion.fusion_op is not FusionOp.NONE:
        used.add(cfg.fusion.base_layer)
    b = cfg.backbone
    taps = tuple(t for t in b.taps if t[0] in used)
    if not taps:
        return b
    return BackboneConfig(b.input_size, b.stage_channels[: taps[-1][1] + 1], taps)


class FSSD(Module):
    """Detector built from a :class:`ModelConfig`.

    With ``fusion_op == "none"`` the detection pyramid starts from the raw
    taps (the plain SSD layout) and no fusion parameters exist.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        dtype = DTYPES[cfg.dtype]
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(_used_backbone(cfg), rng, dtype)
        taps_c = cfg.backbone.tap_channels()
        taps_s = cfg.backbone.tap_sizes()
        f = cfg.fusion
        if f.fusion_op is FusionOp.NONE:
            self.fusion = None
            given = [taps_s[n] for n in f.source_layers]
            given_c = [taps_c[n] for n in f.source_layers]
            if any(a <= b for a, b in zip(given, given[1:])):
                raise ValueError("no-fusion taps must shrink strictly")
            self.pyramid = Pyramid(f, given[0], given_c[-1], rng, dtype, n_given=len(given), given_sizes=given)
            level_c = self.pyramid.level_channels(given_c[-1], given_c)
        else:
            missing = [n for n in f.source_layers if n not in taps_c]
            if missing:
                raise ValueError(f"fusion sources {missing} are not backbone taps")
            if taps_s[f.base_layer] < max(taps_s[n] for n in f.source_layers) // 2:
                raise ValueError("base layer is too small to pool the larger sources onto")
            self.fusion = FusionModule(f, taps_c, rng, dtype)
            self.pyramid = Pyramid(f, taps_s[f.base_layer], f.fused_channels, rng, dtype)
            level_c = self.pyramid.level_channels(f.fused_channels)
        specs = cfg.prior_specs()
        self.priors: PriorBoxSet = generate_priors(specs)
        self.head = MultiboxHead(level_c, [s.per_location for s in specs], cfg.num_classes, rng, dtype)

    @property
    def dtype(self):
        return DTYPES[self.cfg.dtype]

    def features(self, images: Tensor) -> List[Tensor]:
        feats = self.backbone(images)
        if self.fusion is None:
            return self.pyramid(None, [feats[n] for n in self.cfg.fusion.source_layers])
        return self.pyramid(self.fusion(feats))

    def __call__(self, images: Tensor) -> Tuple[Tensor, Tensor]:
        return self.head(self.features(images))

    def lr_multipliers(self, fusion_multiplier: float) -> Dict[str, float]:
        return {name: fusion_multiplier for name, _ in self.named_parameters() if name.startswith("fusion.")}
