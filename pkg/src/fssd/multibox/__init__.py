from .coding import VARIANCES, center_to_corner, corner_to_center, decode_boxes, encode_boxes, iou_matrix
from .head import MultiboxHead, multibox_head
from .loss import LossResult, background_loss, multibox_loss
from .matching import BACKGROUND, GroundTruth, MatchResult, hard_negative_mine, match_priors
from .priors import PriorBoxSet, PriorSpec, build_specs, generate_priors, preset_specs

__all__ = [
    "BACKGROUND",
    "GroundTruth",
    "LossResult",
    "MatchResult",
    "MultiboxHead",
    "PriorBoxSet",
    "PriorSpec",
    "VARIANCES",
    "background_loss",
    "build_specs",
    "center_to_corner",
    "corner_to_center",
    "decode_boxes",
    "encode_boxes",
    "generate_priors",
    "hard_negative_mine",
    "iou_matrix",
    "match_priors",
    "multibox_head",
    "multibox_loss",
    "preset_specs",
]
