"""VOC-style average precision."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .multibox.coding import iou_matrix
from .postprocess import Detection


class Interpolation(str, enum.Enum):
    ALL_POINT = "all_point"
    ELEVEN_POINT = "eleven_point"


@dataclass
class EvalRecord:
    detections: List[Detection]
    gt_boxes: np.ndarray  # (G, 4) corner form
    gt_labels: np.ndarray  # (G,)
    gt_ignore: Optional[np.ndarray] = None  # (G,) bool; ignored GTs neither help nor hurt

    def __post_init__(self):
        self.gt_boxes = np.asarray(self.gt_boxes, dtype=np.float64).reshape(-1, 4)
        self.gt_labels = np.asarray(self.gt_labels, dtype=np.int64).reshape(-1)
        if self.gt_ignore is None:
            self.gt_ignore = np.zeros(len(self.gt_labels), dtype=bool)


def iou(a, b) -> float:
    return float(iou_matrix(np.asarray(a)[None], np.asarray(b)[None])[0, 0])


def pr_curve(tp: np.ndarray, fp: np.ndarray, n_gt: int):
    ctp = np.cumsum(tp)
    cfp = np.cumsum(fp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    return recall, precision


def ap_from_curve(recall: np.ndarray, precision: np.ndarray, interpolation=Interpolation.ALL_POINT) -> float:
    if Interpolation(interpolation) is Interpolation.ELEVEN_POINT:
        total = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            above = precision[recall >= t]
            total += float(above.max()) if above.size else 0.0
        return total / 11.0
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def match_detections(records: Sequence[EvalRecord], category: int, iou_threshold: float = 0.5,
                     keep_unmatched: Optional[Callable[[Detection], bool]] = None):
    """Greedy score-ordered matching for one class.

    Returns (tp, fp, scores, n_gt). Detections that only hit ignored GTs,
    or unmatched ones rejected by ``keep_unmatched``, are dropped.
    """
    dets = []
    n_gt = 0
    for r_i, rec in enumerate(records):
        for d_i, d in enumerate(rec.detections):
            if d.category == category:
                dets.append((-d.score, r_i, d_i, d))
        n_gt += int(np.count_nonzero((rec.gt_labels == category) & ~rec.gt_ignore))
    dets.sort(key=lambda t: (t[0], t[1], t[2]))
    used = {i: np.zeros(len(rec.gt_labels), dtype=bool) for i, rec in enumerate(records)}
    tp, fp, scores = [], [], []
    for neg, r_i, _, d in dets:
        rec = records[r_i]
        cls = rec.gt_labels == category
        ious = iou_matrix(np.asarray(d.box)[None], rec.gt_boxes)[0] if len(rec.gt_boxes) else np.zeros(0)
        ok = cls & ~rec.gt_ignore & ~used[r_i] & (ious >= iou_threshold)
        if ok.any():
            best = int(np.argmax(np.where(ok, ious, -1.0)))
            if used[r_i][best]:
                raise AssertionError("ground truth matched twice")
            used[r_i][best] = True
            tp.append(1.0)
            fp.append(0.0)
        elif np.any(cls & rec.gt_ignore & (ious >= iou_threshold)):
            continue
        elif keep_unmatched is not None and not keep_unmatched(d):
            continue
        else:
            tp.append(0.0)
            fp.append(1.0)
        scores.append(-neg)
    return np.asarray(tp), np.asarray(fp), np.asarray(scores), n_gt


def voc_ap(
    records: Sequence[EvalRecord],
    category: int,
    iou_threshold: float = 0.5,
    interpolation=Interpolation.ALL_POINT,
    keep_unmatched: Optional[Callable[[Detection], bool]] = None,
) -> Optional[float]:
    """AP of one class, or None when the class has no ground truth."""
    tp, fp, _, n_gt = match_detections(records, category, iou_threshold, keep_unmatched)
    if n_gt == 0:
        return None
    if tp.size == 0:
        return 0.0
    recall, precision = pr_curve(tp, fp, n_gt)
    return ap_from_curve(recall, precision, interpolation)


def mean_ap(aps: Dict[int, Optional[float]]) -> float:
    defined = [v for v in aps.values() if v is not None]
    if not defined:
        raise ValueError("no class has a defined AP")
    return float(np.mean(defined))
