"""Default (prior) boxes tiled over the detection pyramid."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class PriorSpec:
    feature_size: int
    scale: float
    next_scale: float
    extra_ratios: Tuple[float, ...] = (2.0,)

    def __post_init__(self):
        if self.scale <= 0 or self.next_scale <= 0:
            raise ValueError(f"prior scales must be positive, got {self.scale}, {self.next_scale}")
        if self.feature_size < 1:
            raise ValueError("feature_size must be >= 1")
        if any(r <= 0 for r in self.extra_ratios):
            raise ValueError("aspect ratios must be positive")

    @property
    def per_location(self) -> int:
        return 2 + 2 * len(self.extra_ratios)

    def shapes(self) -> List[Tuple[float, float]]:
        """(w, h) of every prior at one cell, in emission order."""
        s = self.scale
        out = [(s, s)]
        big = math.sqrt(s * self.next_scale)
        out.append((big, big))
        for r in self.extra_ratios:
            q = math.sqrt(r)
            out.append((s * q, s / q))
            out.append((s / q, s * q))
        return out


@dataclass
class PriorBoxSet:
    boxes: np.ndarray  # (P, 4) center form cx, cy, w, h
    level: np.ndarray  # (P,) pyramid level of each prior

    def __len__(self) -> int:
        return len(self.boxes)

    def counts_per_level(self) -> List[int]:
        return np.bincount(self.level).tolist()


def linear_scales(levels: int, first: float, lo: float, hi: float) -> List[float]:
    """``levels + 1`` scales: ``first`` for level 0, then linear ``lo``..``hi``, extended by one step."""
    rest = levels - 1
    if rest <= 0:
        return [first, lo]
    if rest == 1:
        return [first, lo, hi]
    step = (hi - lo) / (rest - 1)
    return [first] + [lo + step * i for i in range(rest)] + [hi + step]


def default_ratios(levels: int, six_box_levels: Sequence[int]) -> List[Tuple[float, ...]]:
    return [(2.0, 3.0) if k in six_box_levels else (2.0,) for k in range(levels)]


def build_specs(
    sizes: Sequence[int],
    ratios: Sequence[Tuple[float, ...]],
    first_scale: float,
    min_scale: float,
    max_scale: float,
) -> List[PriorSpec]:
    if len(ratios) != len(sizes):
        raise ValueError("one ratio list per level is required")
    scales = linear_scales(len(sizes), first_scale, min_scale, max_scale)
    return [PriorSpec(int(f), scales[k], scales[k + 1], tuple(ratios[k])) for k, f in enumerate(sizes)]


def preset_specs(input_size: int) -> List[PriorSpec]:
    """The SSD300 / SSD512 prior layouts."""
    if input_size == 300:
        sizes = (38, 19, 10, 5, 3, 1)
        return build_specs(sizes, default_ratios(6, (1, 2, 3)), 0.1, 0.2, 0.9)
    if input_size == 512:
        sizes = (64, 32, 16, 8, 4, 2, 1)
        return build_specs(sizes, default_ratios(7, (1, 2, 3, 4)), 0.07, 0.15, 0.9)
    raise ValueError(f"no prior preset for input size {input_size}")


def generate_priors(specs: Sequence[PriorSpec]) -> PriorBoxSet:
    """Tile priors in (level, row, col, anchor) order."""
    boxes, levels = [], []
    for k, spec in enumerate(specs):
        f = spec.feature_size
        centers = (np.arange(f, dtype=np.float64) + 0.5) / f
        cy, cx = np.meshgrid(centers, centers, indexing="ij")
        wh = np.asarray(spec.shapes(), dtype=np.float64)  # (A, 2)
        a = len(wh)
        level_boxes = np.empty((f, f, a, 4))
        level_boxes[..., 0] = cx[..., None]
        level_boxes[..., 1] = cy[..., None]
        level_boxes[..., 2] = wh[:, 0]
        level_boxes[..., 3] = wh[:, 1]
        boxes.append(level_boxes.reshape(-1, 4))
        levels.append(np.full(f * f * a, k, dtype=np.int64))
    if not boxes:
        return PriorBoxSet(np.zeros((0, 4)), np.zeros(0, dtype=np.int64))
    return PriorBoxSet(np.concatenate(boxes), np.concatenate(levels))
