"""Box conversions, IoU and center-offset coding."""

from __future__ import annotations

import numpy as np

VARIANCES = (0.1, 0.1, 0.2, 0.2)
MAX_LOG_SCALE = 10.0


def center_to_corner(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    half = b[..., 2:] / 2
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def corner_to_center(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([(b[..., :2] + b[..., 2:]) / 2, b[..., 2:] - b[..., :2]], axis=-1)


def box_area(b: np.ndarray) -> np.ndarray:
    return np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of corner-form boxes, (len(a), len(b)). Zero-area pairs give 0."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def encode_boxes(gt: np.ndarray, priors: np.ndarray, variances=VARIANCES) -> np.ndarray:
    """Corner-form ground truth -> offsets relative to center-form priors."""
    v = np.asarray(variances, dtype=np.float64)
    g = corner_to_center(gt)
    p = np.asarray(priors, dtype=np.float64)
    if np.any(p[..., 2:] <= 0):
        raise ValueError("prior width/height must be positive")
    if np.any(g[..., 2:] <= 0):
        raise ValueError("degenerate ground-truth box")
    return np.concatenate(
        [
            (g[..., :2] - p[..., :2]) / (p[..., 2:] * v[:2]),
            np.log(g[..., 2:] / p[..., 2:]) / v[2:],
        ],
        axis=-1,
    )


def decode_boxes(offsets: np.ndarray, priors: np.ndarray, variances=VARIANCES) -> np.ndarray:
    """Inverse of :func:`encode_boxes`, returning corner form clipped to [0, 1]."""
    v = np.asarray(variances, dtype=np.float64)
    t = np.asarray(offsets, dtype=np.float64)
    p = np.asarray(priors, dtype=np.float64)
    centers = p[..., :2] + t[..., :2] * v[:2] * p[..., 2:]
    sizes = p[..., 2:] * np.exp(np.clip(t[..., 2:] * v[2:], -MAX_LOG_SCALE, MAX_LOG_SCALE))
    return np.clip(center_to_corner(np.concatenate([centers, sizes], axis=-1)), 0.0, 1.0)
