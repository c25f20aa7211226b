"""Inference over a split and the mAP report."""

from __future__ import annotations

from typing import Dict, List, Optional

import numpy as np

from ..evaluation import EvalRecord, Interpolation, mean_ap, voc_ap
from ..model import FSSD
from ..postprocess import Detection, assemble_detections
from ..tensor_core import no_grad
from .config import EvalConfig
from .shapeworld import CLASSES, Dataset
from .train import to_input


def detect(model: FSSD, images: np.ndarray, ec: EvalConfig) -> List[List[Detection]]:
    """Detections for a uint8 (N, H, W, 3) stack."""
    model.eval()
    out: List[List[Detection]] = []
    with no_grad():
        for lo in range(0, len(images), ec.batch_size):
            loc, conf = model(to_input(images[lo:lo + ec.batch_size], model.dtype))
            for i in range(loc.shape[0]):
                out.append(
                    assemble_detections(
                        loc.data[i],
                        conf.data[i],
                        model.priors.boxes,
                        ec.conf_threshold,
                        ec.nms_iou,
                        ec.top_k_per_class,
                        ec.max_total,
                        model.cfg.priors.variances,
                    )
                )
    return out


def _max_side(box, image_size: int) -> float:
    return max(box[2] - box[0], box[3] - box[1]) * image_size


def size_bucket_records(records: List[EvalRecord], small: bool, threshold_px: float, image_size: int) -> List[EvalRecord]:
    """Ignore GTs outside the bucket; the matcher drops detections that only hit them."""
    out = []
    for r in records:
        sides = np.array([_max_side(b, image_size) for b in r.gt_boxes])
        in_bucket = sides < threshold_px if small else sides >= threshold_px
        out.append(EvalRecord(r.detections, r.gt_boxes, r.gt_labels, ~in_bucket if len(sides) else None))
    return out


def class_aps(records, ec: EvalConfig, num_classes: int, keep_unmatched=None) -> Dict[int, Optional[float]]:
    interp = Interpolation.ELEVEN_POINT if ec.eleven_point else Interpolation.ALL_POINT
    return {c: voc_ap(records, c, ec.iou_threshold, interp, keep_unmatched) for c in range(1, num_classes)}


def _summary(aps: Dict[int, Optional[float]]) -> dict:
    names = {c: CLASSES[c - 1] if c - 1 < len(CLASSES) else str(c) for c in aps}
    try:
        m = mean_ap(aps)
    except ValueError:
        m = None
    return {"per_class": {names[c]: v for c, v in aps.items()}, "mAP": m}


def evaluate_records(records: List[EvalRecord], ec: EvalConfig, num_classes: int, image_size: int) -> dict:
    report = _summary(class_aps(records, ec, num_classes))
    for name, small in (("small", True), ("large", False)):
        bucket = size_bucket_records(records, small, ec.small_side_px, image_size)

        def keep(d: Detection, small=small) -> bool:
            side = _max_side(d.box, image_size)
            return side < ec.small_side_px if small else side >= ec.small_side_px

        report[name] = _summary(class_aps(bucket, ec, num_classes, keep))
    report["num_images"] = len(records)
    report["num_gt"] = int(sum(len(r.gt_labels) for r in records))
    report["interpolation"] = "eleven_point" if ec.eleven_point else "all_point"
    report["iou_threshold"] = ec.iou_threshold
    return report


def evaluate(model: FSSD, ds: Dataset, ec: EvalConfig) -> dict:
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty split")
    dets = detect(model, ds.images, ec)
    records = [EvalRecord(d, b, l) for d, b, l in zip(dets, ds.boxes, ds.labels)]
    return evaluate_records(records, ec, model.cfg.num_classes, ds.images.shape[1])
