"""Deterministic synthetic detection data: circles, squares and triangles on noise.

Every image has its own SplitMix64 stream keyed by (seed, image index), so
any subset of images can be regenerated independently and bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

CLASSES = ("circle", "square", "triangle")
MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Counter-based SplitMix64; ``block`` draws many values at once."""

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def block(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GOLDEN)
            out = _mix(z)
        self.state = (self.state + n * GOLDEN) & MASK64
        return out

    def next_u64(self) -> int:
        return int(self.block(1)[0])

    def uniform(self, n: Optional[int] = None):
        """Doubles in [0, 1) from the top 53 bits."""
        vals = (self.block(1 if n is None else n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return float(vals[0]) if n is None else vals

    def integers(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] inclusive."""
        return lo + min(int(self.uniform() * (hi - lo + 1)), hi - lo)


def image_stream(seed: int, index: int) -> SplitMix64:
    root = SplitMix64(seed)
    root.state = (root.state + index * GOLDEN) & MASK64
    return SplitMix64(root.next_u64())


@dataclass
class ShapeWorldSpec:
    seed: int = 0
    image_size: int = 300
    num_images: int = 600
    min_objects: int = 1
    max_objects: int = 6
    small_fraction: float = 0.5
    small_side: Tuple[int, int] = (10, 30)
    large_side: Tuple[int, int] = (60, 180)
    max_iou: float = 0.3
    max_retries: int = 100

    def __post_init__(self):
        self.small_side = tuple(self.small_side)
        self.large_side = tuple(self.large_side)
        if self.num_images < 0:
            raise ValueError("num_images must be non-negative")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if self.large_side[1] > self.image_size:
            raise ValueError("large objects do not fit the image")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["small_side"] = list(self.small_side)
        d["large_side"] = list(self.large_side)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeWorldSpec":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) uint8
    boxes: np.ndarray  # (G, 4) normalized corner form
    labels: np.ndarray  # (G,) in 1..3
    instances: np.ndarray  # (H, W) int16, 0 = background, k = k-th object
    dropped: int = 0

    def annotation(self, image_id: int) -> dict:
        return {"id": image_id, "boxes": self.boxes.tolist(), "labels": self.labels.tolist()}


def shape_mask(kind: str, side: int) -> np.ndarray:
    """Boolean side x side raster sampled at pixel centers."""
    c = (np.arange(side) + 0.5) / side  # pixel centers in [0, 1]
    yy, xx = np.meshgrid(c, c, indexing="ij")
    if kind == "square":
        return np.ones((side, side), dtype=bool)
    if kind == "circle":
        return (xx - 0.5) ** 2 + (yy - 0.5) ** 2 <= 0.25
    if kind == "triangle":
        # apex at top center, base along the bottom edge
        return np.abs(xx - 0.5) <= 0.5 * yy
    raise ValueError(f"unknown shape {kind!r}")


def _box_iou(a, b) -> float:
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def render(spec: ShapeWorldSpec, index: int) -> Sample:
    rng = image_stream(spec.seed, index)
    size = spec.image_size
    base = np.array([rng.integers(40, 215) for _ in range(3)], dtype=np.int64)
    noise = (rng.uniform(size * size * 3).reshape(size, size, 3) * 61).astype(np.int64) - 30
    image = np.clip(base + noise, 0, 255).astype(np.uint8)
    instances = np.zeros((size, size), dtype=np.int16)

    wanted = rng.integers(spec.min_objects, spec.max_objects)
    boxes: List[Tuple[int, int, int, int]] = []
    labels: List[int] = []
    dropped = 0
    for _ in range(wanted):
        placed = False
        for _ in range(spec.max_retries):
            kind_i = rng.integers(0, len(CLASSES) - 1)
            lo, hi = spec.small_side if rng.uniform() < spec.small_fraction else spec.large_side
            side = rng.integers(lo, hi)
            x0 = rng.integers(0, size - side)
            y0 = rng.integers(0, size - side)
            mask = shape_mask(CLASSES[kind_i], side)
            ys, xs = np.nonzero(mask)
            box = (x0 + xs.min(), y0 + ys.min(), x0 + xs.max() + 1, y0 + ys.max() + 1)
            region = instances[y0:y0 + side, x0:x0 + side]
            if np.any(region[mask]):
                continue
            if any(_box_iou(box, other) > spec.max_iou for other in boxes):
                continue
            color = np.array([rng.integers(0, 255) for _ in range(3)], dtype=np.int64)
            if np.abs(color - base).mean() < 60:
                continue
            region[mask] = len(boxes) + 1
            image[y0:y0 + side, x0:x0 + side][mask] = color.astype(np.uint8)
            boxes.append(box)
            labels.append(kind_i + 1)
            placed = True
            break
        if not placed:
            dropped += 1
    norm = np.asarray(boxes, dtype=np.float64).reshape(-1, 4) / size
    return Sample(image, norm, np.asarray(labels, dtype=np.int64), instances, dropped)


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, 3) uint8
    boxes: List[np.ndarray]
    labels: List[np.ndarray]
    ids: List[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)

    def annotations(self) -> List[dict]:
        return [{"id": i, "boxes": b.tolist(), "labels": l.tolist()} for i, b, l in zip(self.ids, self.boxes, self.labels)]


def generate_dataset(spec: ShapeWorldSpec, start: int = 0, count: Optional[int] = None) -> Dataset:
    """Images ``start .. start+count`` of the seed's stream (default: all ``num_images``)."""
    count = spec.num_images - start if count is None else count
    samples = [render(spec, i) for i in range(start, start + count)]
    if not samples:
        return Dataset(np.zeros((0, spec.image_size, spec.image_size, 3), np.uint8), [], [], [])
    return Dataset(
        np.stack([s.image for s in samples]),
        [s.boxes for s in samples],
        [s.labels for s in samples],
        list(range(start, start + count)),
    )


def write_dataset(ds: Dataset, out_dir, spec: Optional[ShapeWorldSpec] = None) -> Path:
    from PIL import Image

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for image_id, img in zip(ds.ids, ds.images):
        Image.fromarray(img).save(out / "images" / f"{image_id:06d}.png")
    with open(out / "annotations.jsonl", "w") as fh:
        for rec in ds.annotations():
            fh.write(json.dumps(rec) + "\n")
    if spec is not None:
        (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return out


def read_dataset(path) -> Dataset:
    from PIL import Image

    root = Path(path)
    records = [json.loads(line) for line in (root / "annotations.jsonl").read_text().splitlines() if line.strip()]
    images = [np.asarray(Image.open(root / "images" / f"{r['id']:06d}.png").convert("RGB")) for r in records]
    return Dataset(
        np.stack(images) if images else np.zeros((0, 1, 1, 3), np.uint8),
        [np.asarray(r["boxes"], dtype=np.float64).reshape(-1, 4) for r in records],
        [np.asarray(r["labels"], dtype=np.int64) for r in records],
        [int(r["id"]) for r in records],
    )


def flip_horizontal(image: np.ndarray, boxes: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Mirror an (H, W, C) image and its pixel-aligned normalized boxes left-right.

    x coordinates are flipped on the integer pixel grid so that flipping
    twice reproduces the original floats exactly.
    """
    w = image.shape[1]
    flipped = image[:, ::-1].copy()
    b = np.asarray(boxes, dtype=np.float64).copy()
    if len(b):
        px = np.rint(b[:, [2, 0]] * w)
        b[:, [0, 2]] = (w - px) / w
    return flipped, b
