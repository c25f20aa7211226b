"""Training loop: batch assembly, multibox loss, SGD with the fusion lr multiplier."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from ..model import FSSD
from ..multibox import GroundTruth, match_priors, multibox_loss
from ..tensor_core import SGD, Tensor
from .checkpoint import Checkpoint, LoadReport, load_state
from .config import ExperimentConfig, model_hash
from .shapeworld import Dataset, flip_horizontal

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: FSSD
    optimizer: SGD
    step: int
    history: List[Dict[str, float]] = field(default_factory=list)
    load_report: Optional[LoadReport] = None

    def checkpoint(self, cfg: ExperimentConfig) -> Checkpoint:
        return make_checkpoint(self.model, self.optimizer, self.step, cfg)


def to_input(images: np.ndarray, dtype) -> Tensor:
    """uint8 (N, H, W, 3) -> NCHW floats in [-0.5, 0.5]."""
    x = images.astype(dtype) / dtype(255.0) - dtype(0.5)
    return Tensor(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))


def batch_indices(seed: int, step: int, batch: int, n: int) -> np.ndarray:
    """Dataset rows for ``step``: consecutive slots of per-epoch seeded permutations."""
    slots = np.arange(step * batch, (step + 1) * batch)
    out = np.empty(batch, dtype=np.int64)
    for epoch in np.unique(slots // n):
        perm = np.random.default_rng([seed, int(epoch), 0]).permutation(n)
        sel = slots // n == epoch
        out[sel] = perm[slots[sel] % n]
    return out


def flip_mask(seed: int, step: int, batch: int) -> np.ndarray:
    return np.random.default_rng([seed, step, 1]).random(batch) < 0.5


def assemble_batch(ds: Dataset, idx: np.ndarray, flips: np.ndarray):
    images, gts = [], []
    for i, f in zip(idx, flips):
        img, boxes = ds.images[i], ds.boxes[i]
        if f:
            img, boxes = flip_horizontal(img, boxes)
        images.append(img)
        gts.append(GroundTruth(boxes, ds.labels[i]))
    return np.stack(images), gts


def make_checkpoint(model: FSSD, opt: Optional[SGD], step: int, cfg: ExperimentConfig) -> Checkpoint:
    tensors = {k: np.asarray(v, dtype=np.float32).copy() for k, v in model.state().items()}
    if opt is not None:
        for name in sorted(opt.velocity):
            tensors["optim.velocity." + name] = np.asarray(opt.velocity[name], dtype=np.float32).copy()
    return Checkpoint(tensors, step, cfg.to_dict(), model_hash(cfg.model))


def first_bad_parameter(model: FSSD) -> Optional[str]:
    for name, p in model.named_parameters():
        if not np.all(np.isfinite(p.data)) or (p.grad is not None and not np.all(np.isfinite(p.grad))):
            return name
    return None


def train_step(model: FSSD, opt: SGD, cfg: ExperimentConfig, ds: Dataset, step: int) -> Dict[str, float]:
    tc = cfg.train
    idx = batch_indices(tc.seed, step, tc.batch_size, len(ds))
    flips = flip_mask(tc.seed, step, tc.batch_size) if tc.flip else np.zeros(tc.batch_size, dtype=bool)
    images, gts = assemble_batch(ds, idx, flips)
    pc = cfg.model.priors
    matches = [match_priors(g, model.priors.boxes, pc.match_iou, pc.variances) for g in gts]
    opt.zero_grad()
    loc, conf = model(to_input(images, model.dtype))
    res = multibox_loss(loc, conf, matches, neg_ratio=pc.neg_ratio)
    value = float(res.loss.data)
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite loss at iteration {step}; first bad parameter: {first_bad_parameter(model)}")
    res.loss.backward()
    bad = first_bad_parameter(model)
    if bad is not None:
        raise TrainingDiverged(f"non-finite gradient at iteration {step} in {bad}")
    lr = tc.lr_at(step)
    opt.step(lr)
    return {"iter": step, "loss": value, "conf": res.conf, "loc": res.loc, "num_pos": res.num_pos, "lr": lr}


def build_model(cfg: ExperimentConfig) -> FSSD:
    return FSSD(cfg.model, seed=cfg.train.seed)


def train(
    cfg: ExperimentConfig,
    ds: Dataset,
    init: Optional[Checkpoint] = None,
    resume: Optional[Checkpoint] = None,
    stop_at: Optional[int] = None,
    on_step: Optional[Callable[[Dict[str, float]], None]] = None,
) -> TrainResult:
    """Run iterations ``[start, stop_at or cfg.train.iterations)``.

    ``init`` warm-starts by name (step counter restarts at 0); ``resume``
    restores weights, momentum buffers and the step counter of an earlier
    run of the same config.
    """
    if len(ds) == 0:
        raise ValueError("empty training set")
    tc = cfg.train
    model = build_model(cfg).train()
    report = None
    start = 0
    if init is not None:
        report = load_state(model, init.model_tensors())
        log.info("warm start: %d loaded, %d kept at init", len(report.loaded), len(report.missing) + len(report.mismatched))
    opt = SGD(
        dict(model.named_parameters()),
        momentum=tc.momentum,
        weight_decay=tc.weight_decay,
        lr_multipliers=model.lr_multipliers(tc.fusion_lr_multiplier),
    )
    if resume is not None:
        if resume.config_hash and resume.config_hash != model_hash(cfg.model):
            raise ValueError("resume checkpoint was written for a different model config")
        load_state(model, resume.model_tensors())
        for name, v in resume.optimizer_tensors().items():
            opt.velocity[name] = v.astype(model.dtype).copy()
        start = resume.step
    history: List[Dict[str, float]] = []
    end = tc.iterations if stop_at is None else stop_at
    for step in range(start, end):
        rec = train_step(model, opt, cfg, ds, step)
        history.append(rec)
        if on_step is not None:
            on_step(rec)
    return TrainResult(model, opt, max(start, end), history, report)


def smoothed(losses, window: int = 50) -> np.ndarray:
    """Trailing mean over ``window`` iterations (shorter at the start)."""
    x = np.asarray(losses, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(x)])
    i = np.arange(1, len(x) + 1)
    lo = np.maximum(0, i - window)
    return (c[i] - c[lo]) / (i - lo)
