"""Joint confidence + localization objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from ..tensor_core import Tensor, functional as F
from .matching import MatchResult, hard_negative_mine


@dataclass
class LossResult:
    loss: Tensor  # 0-d, differentiable
    conf: float
    loc: float
    num_pos: int
    negatives: List[np.ndarray]


def background_loss(conf_logits: np.ndarray) -> np.ndarray:
    """Cross-entropy of every row against class 0."""
    return -F.log_softmax(conf_logits)[..., 0]


def multibox_loss(
    loc_pred: Tensor,
    conf_pred: Tensor,
    matches: Sequence[MatchResult],
    negatives: Optional[Sequence[np.ndarray]] = None,
    neg_ratio: float = 3.0,
    alpha: float = 1.0,
) -> LossResult:
    """Loss over a batch: loc_pred (N, P, 4), conf_pred (N, P, K).

    ``negatives`` (per image prior indices) are mined from ``conf_pred``
    when not given. The sum is divided by the batch's positive count
    (at least 1).
    """
    n, p, k = conf_pred.shape
    if loc_pred.shape != (n, p, 4) or len(matches) != n:
        raise ValueError("prediction shapes disagree with the match list")
    if negatives is None:
        negatives = [
            hard_negative_mine(background_loss(conf_pred.data[i]), m, neg_ratio) for i, m in enumerate(matches)
        ]
    conf_rows, conf_targets, loc_rows, loc_targets = [], [], [], []
    for i, m in enumerate(matches):
        pos = np.flatnonzero(m.positives)
        sel = np.concatenate([pos, np.asarray(negatives[i], dtype=np.int64)])
        conf_rows.append(i * p + sel)
        conf_targets.append(m.labels[sel])
        loc_rows.append(i * p + pos)
        loc_targets.append(m.targets[pos])
    conf_rows = np.concatenate(conf_rows)
    loc_rows = np.concatenate(loc_rows)
    num_pos = int(len(loc_rows))
    norm = 1.0 / max(num_pos, 1)

    conf_flat = F.reshape(conf_pred, (n * p, k))
    ce = F.softmax_cross_entropy(F.gather_rows(conf_flat, conf_rows), np.concatenate(conf_targets))
    conf_sum = F.total(ce)
    terms = [conf_sum]
    loc_value = 0.0
    if num_pos:
        loc_flat = F.reshape(loc_pred, (n * p, 4))
        target = np.concatenate(loc_targets).astype(loc_pred.dtype)
        sl1 = F.total(F.smooth_l1(F.gather_rows(loc_flat, loc_rows), target))
        loc_value = float(sl1.data)
        terms.append(F.scale(sl1, alpha))
    total = F.scale(F.elementwise_add(terms), norm)
    return LossResult(
        loss=total,
        conf=float(conf_sum.data) * norm,
        loc=loc_value * alpha * norm,
        num_pos=num_pos,
        negatives=list(negatives),
    )
