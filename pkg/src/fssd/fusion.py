"""Feature fusion and pyramid generation.

Selected backbone taps are projected with 1x1 convolutions, resized to the
base layer's spatial size (max-pool for the larger map, bilinear for the
smaller ones), fused once by channel concatenation or element-wise sum,
optionally batch-normalized, and turned into a detection pyramid by a
chain of down-sampling blocks.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .backbone import FeatureMapSet
from .tensor_core import Tensor, functional as F
from .tensor_core.layers import BatchNorm2d, Conv2d, Module


class FusionOp(str, enum.Enum):
    CONCAT = "concat"
    ELEMENT_SUM = "sum"
    NONE = "none"  # no fusion: SSD-style pyramid straight from the taps


class PyramidVariant(str, enum.Enum):
    A = "A"  # fused map is itself the first detection map
    B = "B"  # simple blocks after the fused map
    C = "C"  # bottleneck blocks after the fused map


class TransformMode(str, enum.Enum):
    POOL = "pool"
    IDENTITY = "identity"
    BILINEAR = "bilinear"


@dataclass
class FusionConfig:
    source_layers: Tuple[str, ...] = ("conv4_3", "fc_7", "conv7_2")
    projection_channels: Tuple[int, ...] = (256, 256, 256)
    fusion_op: FusionOp = FusionOp.CONCAT
    normalize_after_fusion: bool = True
    base_layer: str = "conv4_3"
    pyramid_variant: PyramidVariant = PyramidVariant.B
    pyramid_channels: Tuple[int, ...] = (512, 512, 256, 256, 256, 256)

    def __post_init__(self):
        self.source_layers = tuple(self.source_layers)
        if isinstance(self.projection_channels, int):
            self.projection_channels = (self.projection_channels,) * len(self.source_layers)
        self.projection_channels = tuple(int(c) for c in self.projection_channels)
        self.pyramid_channels = tuple(int(c) for c in self.pyramid_channels)
        self.fusion_op = FusionOp(self.fusion_op)
        self.pyramid_variant = PyramidVariant(self.pyramid_variant)
        if not self.source_layers:
            raise ValueError("source_layers must not be empty")
        if len(set(self.source_layers)) != len(self.source_layers):
            raise ValueError(f"duplicate source layers {self.source_layers}")
        if len(self.projection_channels) != len(self.source_layers):
            raise ValueError("one projection width per source layer is required")
        if any(c < 1 for c in self.projection_channels + self.pyramid_channels):
            raise ValueError("channel widths must be positive")
        if not self.pyramid_channels:
            raise ValueError("pyramid_channels must name at least one level")
        if self.fusion_op is FusionOp.ELEMENT_SUM and len(set(self.projection_channels)) != 1:
            raise ValueError("element-wise sum needs one common projection width")
        if self.fusion_op is not FusionOp.NONE and self.base_layer not in self.source_layers:
            raise ValueError(f"base layer {self.base_layer!r} is not a source layer")

    @property
    def num_levels(self) -> int:
        return len(self.pyramid_channels)

    @property
    def fused_channels(self) -> int:
        if self.fusion_op is FusionOp.CONCAT:
            return sum(self.projection_channels)
        return self.projection_channels[0]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fusion_op"] = self.fusion_op.value
        d["pyramid_variant"] = self.pyramid_variant.value
        d["source_layers"] = list(self.source_layers)
        d["projection_channels"] = list(self.projection_channels)
        d["pyramid_channels"] = list(self.pyramid_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FusionConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def pyramid_sizes(base: int, levels: int) -> List[int]:
    """Detection map sizes: ceil-halving from ``base``, with a size-3 map collapsing to 1."""
    sizes = [base]
    while len(sizes) < levels:
        s = sizes[-1]
        if s == 1:
            raise ValueError(f"cannot build {levels} levels from base size {base}")
        sizes.append(1 if s <= 3 else -(-s // 2))
    return sizes


def downsample_padding(size: int, target: int) -> int:
    """Padding for a 3x3 stride-2 conv that maps ``size`` to ``target``."""
    for pad in (1, 0):
        if size + 2 * pad >= 3 and F.output_size(size, 3, 2, pad) == target:
            return pad
    raise ValueError(f"no padding maps {size} to {target} with a 3x3 stride-2 conv")


def choose_transform(size: int, target: int) -> TransformMode:
    if size == target:
        return TransformMode.IDENTITY
    if size < target:
        return TransformMode.BILINEAR
    if F.output_size(size, 2, 2, 0, ceil_mode=True) == target:
        return TransformMode.POOL
    raise ValueError(f"a {size}x{size} source cannot be pooled once to {target}x{target}")


def transform_source(x: Tensor, target_size: int, mode: TransformMode, proj: F.ConvParams) -> Tensor:
    """1x1 projection followed by the resize that brings ``x`` to the base size."""
    mode = TransformMode(mode)
    size = x.shape[2]
    if mode is TransformMode.POOL and F.output_size(size, 2, 2, 0, ceil_mode=True) != target_size:
        raise ValueError(f"POOL maps {size} to {F.output_size(size, 2, 2, 0, True)}, not {target_size}")
    if mode is TransformMode.IDENTITY and size != target_size:
        raise ValueError(f"IDENTITY needs size {target_size}, got {size}")
    y = F.conv2d(x, proj)
    if mode is TransformMode.POOL:
        return F.max_pool2d(y, 2, 2, ceil_mode=True)
    if mode is TransformMode.BILINEAR:
        return F.bilinear_resize(y, target_size, target_size)
    return y


def fuse(transformed: Sequence[Tensor], cfg: FusionConfig, bn: Optional[BatchNorm2d] = None) -> Tensor:
    """Combine the resized sources; apply ``bn`` when normalization is on."""
    sizes = {t.shape[2:] for t in transformed}
    if len(sizes) != 1:
        raise ValueError(f"fusion inputs differ in spatial size: {sorted(sizes)}")
    if cfg.fusion_op is FusionOp.CONCAT:
        f = F.concat_channels(transformed)
    elif cfg.fusion_op is FusionOp.ELEMENT_SUM:
        widths = {t.shape[1] for t in transformed}
        if len(widths) != 1:
            raise ValueError(f"element-wise sum over unequal widths {sorted(widths)}")
        f = F.elementwise_add(transformed)
    else:
        raise ValueError("fuse() called with fusion disabled")
    if cfg.normalize_after_fusion:
        if bn is None:
            raise ValueError("normalize_after_fusion requires a batch-norm layer")
        f = bn(f)
    return f


class FusionModule(Module):
    """The T_i projections plus the post-fusion batch norm."""

    def __init__(self, cfg: FusionConfig, tap_channels: Dict[str, int], rng, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        # a bias feeding straight into batch norm is cancelled by the mean subtraction
        self.projections = [
            Conv2d(tap_channels[name], width, 1, rng, padding=0, dtype=dtype, bias=not cfg.normalize_after_fusion)
            for name, width in zip(cfg.source_layers, cfg.projection_channels)
        ]
        self.bn = BatchNorm2d(cfg.fused_channels, dtype=dtype) if cfg.normalize_after_fusion else None

    def __call__(self, feats: FeatureMapSet) -> Tensor:
        target = feats[self.cfg.base_layer].shape[2]
        out = []
        for name, proj in zip(self.cfg.source_layers, self.projections):
            x = feats[name]
            out.append(transform_source(x, target, choose_transform(x.shape[2], target), proj.params))
        return fuse(out, self.cfg, self.bn)


class SimpleBlock(Module):
    def __init__(self, in_c: int, out_c: int, stride: int, padding: int, rng, dtype):
        super().__init__()
        self.conv = Conv2d(in_c, out_c, 3, rng, stride=stride, padding=padding, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return F.relu(self.conv(x))


class BottleneckBlock(Module):
    def __init__(self, in_c: int, out_c: int, stride: int, padding: int, rng, dtype):
        super().__init__()
        hidden = max(1, out_c // 2)
        self.reduce = Conv2d(in_c, hidden, 1, rng, padding=0, dtype=dtype)
        self.conv = Conv2d(hidden, out_c, 3, rng, stride=stride, padding=padding, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return F.relu(self.conv(F.relu(self.reduce(x))))


class Pyramid(Module):
    """Down-sampling chain producing the detection maps.

    ``first_channels`` is the width of the map the chain starts from (the
    fused map, or the last tap when fusion is off). ``n_given`` leading
    levels are supplied by the caller rather than computed.
    """

    def __init__(
        self,
        cfg: FusionConfig,
        base_size: int,
        first_channels: int,
        rng,
        dtype=np.float64,
        n_given: int = 0,
        given_sizes: Sequence[int] = (),
    ):
        super().__init__()
        self.cfg = cfg
        variant = cfg.pyramid_variant
        widths = cfg.pyramid_channels
        if n_given:
            sizes = list(given_sizes) + pyramid_sizes(given_sizes[-1], cfg.num_levels - n_given + 1)[1:]
        else:
            sizes = pyramid_sizes(base_size, cfg.num_levels)
        self.sizes = sizes
        self.n_given = n_given
        self.head_block = None
        prev = first_channels
        start = n_given
        if not n_given:
            if variant is PyramidVariant.A:
                prev = first_channels
            else:
                self.head_block = SimpleBlock(first_channels, widths[0], 1, 1, rng, dtype)
                prev = widths[0]
            start = 1
        block = BottleneckBlock if variant is PyramidVariant.C else SimpleBlock
        self.blocks = []
        for level in range(start, cfg.num_levels):
            pad = downsample_padding(sizes[level - 1], sizes[level])
            self.blocks.append(block(prev, widths[level], 2, pad, rng, dtype))
            prev = widths[level]

    def level_channels(self, first_channels: int, given_channels: Sequence[int] = ()) -> List[int]:
        widths = list(self.cfg.pyramid_channels)
        if self.n_given:
            return list(given_channels) + widths[self.n_given:]
        if self.cfg.pyramid_variant is PyramidVariant.A:
            return [first_channels] + widths[1:]
        return widths

    def __call__(self, start: Tensor, given: Sequence[Tensor] = ()) -> List[Tensor]:
        if self.n_given:
            maps = list(given)
            x = maps[-1]
        else:
            x = start if self.head_block is None else self.head_block(start)
            maps = [x]
        for blk in self.blocks:
            x = blk(x)
            maps.append(x)
        return maps


def generate_pyramid(f: Tensor, pyramid: Pyramid) -> List[Tensor]:
    return pyramid(f)


def fssd_forward(backbone_out: FeatureMapSet, fusion: FusionModule, pyramid: Pyramid) -> List[Tensor]:
    missing = [n for n in fusion.cfg.source_layers if n not in backbone_out]
    if missing:
        raise KeyError(f"backbone output lacks taps {missing}")
    return pyramid(fusion(backbone_out))
