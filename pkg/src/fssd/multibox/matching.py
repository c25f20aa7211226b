"""Prior-to-ground-truth matching and hard negative mining."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coding import VARIANCES, center_to_corner, encode_boxes, iou_matrix

BACKGROUND = -1


@dataclass
class GroundTruth:
    boxes: np.ndarray  # (G, 4) corner form, normalized
    labels: np.ndarray  # (G,) in [1, K]

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.labels):
            raise ValueError("one label per box is required")
        b = self.boxes
        if len(b) and (np.any(b[:, 0] >= b[:, 2]) or np.any(b[:, 1] >= b[:, 3])):
            raise ValueError("ground-truth boxes must have xmin < xmax and ymin < ymax")
        if len(b) and (b.min() < 0 or b.max() > 1):
            raise ValueError("ground-truth boxes must lie in [0, 1]")
        if len(self.labels) and self.labels.min() < 1:
            raise ValueError("label 0 is reserved for background")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class MatchResult:
    matched_gt: np.ndarray  # (P,) GT index or BACKGROUND
    labels: np.ndarray  # (P,) class per prior, 0 = background
    targets: np.ndarray  # (P, 4) encoded offsets (zeros on background)

    @property
    def positives(self) -> np.ndarray:
        return self.matched_gt != BACKGROUND

    @property
    def num_pos(self) -> int:
        return int(np.count_nonzero(self.positives))


def match_priors(
    gts: GroundTruth,
    priors: np.ndarray,
    iou_threshold: float = 0.5,
    variances=VARIANCES,
) -> MatchResult:
    """Bipartite step then threshold step.

    Each GT, in index order, first claims its best still-unclaimed prior
    regardless of IoU. Every other prior then takes the GT it overlaps
    most (lowest GT index on ties) when that IoU reaches the threshold.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    priors = np.asarray(priors, dtype=np.float64)
    p = len(priors)
    matched = np.full(p, BACKGROUND, dtype=np.int64)
    if len(gts) == 0:
        return MatchResult(matched, np.zeros(p, dtype=np.int64), np.zeros((p, 4)))
    overlaps = iou_matrix(gts.boxes, center_to_corner(priors))  # (G, P)
    forced = np.zeros(p, dtype=bool)
    for g in range(len(gts)):
        row = np.where(forced, -1.0, overlaps[g])
        best = int(np.argmax(row))
        matched[best] = g
        forced[best] = True
    best_gt = np.argmax(overlaps, axis=0)
    best_iou = overlaps[best_gt, np.arange(p)]
    take = ~forced & (best_iou >= iou_threshold)
    matched[take] = best_gt[take]
    pos = matched != BACKGROUND
    labels = np.zeros(p, dtype=np.int64)
    labels[pos] = gts.labels[matched[pos]]
    targets = np.zeros((p, 4))
    if pos.any():
        targets[pos] = encode_boxes(gts.boxes[matched[pos]], priors[pos], variances)
    return MatchResult(matched, labels, targets)


def hard_negative_mine(conf_loss: np.ndarray, match: MatchResult, ratio: float = 3.0) -> np.ndarray:
    """Indices of the highest-loss background priors, ``ratio`` per positive.

    With no positives the single hardest negative is taken. Ties keep the
    lower prior index first.
    """
    if ratio <= 0:
        raise ValueError("ratio must be positive")
    conf_loss = np.asarray(conf_loss)
    neg = np.flatnonzero(~match.positives)
    n_pos = match.num_pos
    k = int(np.floor(ratio * n_pos)) if n_pos else 1
    k = min(k, len(neg))
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-conf_loss[neg], kind="stable")
    return neg[order[:k]]
