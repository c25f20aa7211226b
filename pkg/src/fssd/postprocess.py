"""Raw head outputs -> scored, suppressed detections."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .multibox.coding import VARIANCES, decode_boxes, iou_matrix
from .tensor_core.functional import softmax


@dataclass(frozen=True)
class Detection:
    category: int
    score: float
    box: tuple  # (xmin, ymin, xmax, ymax), normalized

    def to_dict(self) -> dict:
        return {"category": int(self.category), "score": float(self.score), "box": [float(v) for v in self.box]}


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float = 0.45, top_k: Optional[int] = None) -> np.ndarray:
    """Greedy suppression; returns kept indices in descending score order."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    keep: List[int] = []
    limit = len(order) if top_k is None else top_k
    while order.size and len(keep) < limit:
        i = int(order[0])
        keep.append(i)
        rest = order[1:]
        if not rest.size:
            break
        overlap = iou_matrix(boxes[i:i + 1], boxes[rest])[0]
        order = rest[overlap <= iou_threshold]
    return np.asarray(keep, dtype=np.int64)


def assemble_detections(
    loc: np.ndarray,
    conf: np.ndarray,
    priors: np.ndarray,
    conf_threshold: float = 0.01,
    nms_iou: float = 0.45,
    top_k_per_class: int = 200,
    max_total: int = 200,
    variances=VARIANCES,
) -> List[Detection]:
    """Single-image inference path: loc (P, 4) offsets, conf (P, K) logits."""
    loc = np.asarray(loc, dtype=np.float64)
    conf = np.asarray(conf, dtype=np.float64)
    if loc.shape[0] != conf.shape[0] or loc.shape[0] != len(priors):
        raise ValueError("loc, conf and priors disagree on the prior count")
    probs = softmax(conf)
    boxes = decode_boxes(loc, priors, variances)
    found = []
    for c in range(1, probs.shape[1]):
        cand = np.flatnonzero(probs[:, c] >= conf_threshold)
        if not cand.size:
            continue
        kept = cand[nms(boxes[cand], probs[cand, c], nms_iou, top_k_per_class)]
        for i in kept:
            found.append((-probs[i, c], c, int(i)))
    found.sort()
    return [
        Detection(c, float(-neg), tuple(float(v) for v in boxes[i]))
        for neg, c, i in found[:max_total]
    ]
