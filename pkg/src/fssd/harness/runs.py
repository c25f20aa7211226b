"""File-level workflows shared by the CLI and the ablation runner."""

from __future__ import annotations

import json
import logging
import warnings
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from ..evaluation import EvalRecord
from ..model import FSSD
from .checkpoint import Checkpoint, load_state, save_checkpoint
from .config import ExperimentConfig, model_hash
from .evaluate import detect, evaluate_records
from .shapeworld import CLASSES, Dataset, generate_dataset, read_dataset
from .train import TrainResult, train

log = logging.getLogger(__name__)


def load_splits(cfg: ExperimentConfig) -> Tuple[Dataset, Dataset]:
    """Train split = image ids [0, train_images); test split = the next test_images ids."""
    d = cfg.data
    if d.dir is None:
        return (
            generate_dataset(d.spec, 0, d.train_images),
            generate_dataset(d.spec, d.train_images, d.test_images),
        )
    full = read_dataset(d.dir)

    def pick(lo, hi):
        rows = [i for i, k in enumerate(full.ids) if lo <= k < hi]
        return Dataset(
            full.images[rows] if rows else full.images[:0],
            [full.boxes[i] for i in rows],
            [full.labels[i] for i in rows],
            [full.ids[i] for i in rows],
        )

    return pick(0, d.train_images), pick(d.train_images, d.train_images + d.test_images)


def sidecar(path, suffix: str) -> Path:
    """``run/model.ckpt`` -> ``run/model<suffix>``."""
    p = Path(path)
    return p.with_name(p.stem + suffix)


def run_train(
    cfg: ExperimentConfig,
    out: Path,
    init: Optional[Checkpoint] = None,
    resume: Optional[Checkpoint] = None,
    train_ds: Optional[Dataset] = None,
    plot: bool = True,
    on_step: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Train, then write the checkpoint, a JSONL metrics log and a loss figure beside it.

    With ``init`` the warm-start schedule applies (see TrainConfig.warm_start).
    """
    if init is not None:
        cfg = ExperimentConfig(cfg.model, cfg.data, cfg.train.warm_start(), cfg.eval)
    if train_ds is None:
        train_ds, _ = load_splits(cfg)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics = sidecar(out, ".metrics.jsonl")
    mode = "a" if resume is not None else "w"
    with open(metrics, mode) as fh:

        def record(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if on_step:
                on_step(rec)

        res = train(cfg, train_ds, init=init, resume=resume, on_step=record)
    save_checkpoint(out, res.checkpoint(cfg))
    if plot and res.history:
        from .plots import loss_curve

        history = [json.loads(line) for line in metrics.read_text().splitlines()]
        loss_curve(history, sidecar(out, ".loss.png"))
    return res


def model_from_checkpoint(ckpt: Checkpoint, cfg: Optional[ExperimentConfig] = None) -> Tuple[FSSD, ExperimentConfig]:
    """Rebuild the model; ``cfg`` defaults to the config stored in the checkpoint."""
    if cfg is None:
        if ckpt.config is None:
            raise ValueError("checkpoint carries no config; pass --config")
        cfg = ExperimentConfig.from_dict(ckpt.config)
    model = FSSD(cfg.model, seed=cfg.train.seed)
    if ckpt.config_hash and ckpt.config_hash != model_hash(cfg.model):
        warnings.warn("checkpoint was written for a different model config; loading by name", stacklevel=2)
    report = load_state(model, ckpt.model_tensors())
    if report.missing or report.mismatched:
        log.warning("%d tensors missing, %d mismatched", len(report.missing), len(report.mismatched))
    return model, cfg


def eval_records(model: FSSD, ds: Dataset, cfg: ExperimentConfig) -> List[EvalRecord]:
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty split")
    dets = detect(model, ds.images, cfg.eval)
    return [EvalRecord(d, b, l) for d, b, l in zip(dets, ds.boxes, ds.labels)]


def run_eval(
    model: FSSD,
    cfg: ExperimentConfig,
    ds: Dataset,
    out: Optional[Path] = None,
) -> dict:
    """mAP report; with ``out`` also a per-class CSV and a PR-curve figure beside it."""
    records = eval_records(model, ds, cfg)
    report = evaluate_records(records, cfg.eval, cfg.model.num_classes, ds.images.shape[1])
    if out is not None:
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        write_class_csv(report, sidecar(out, ".csv"))
        from .plots import pr_curves

        names = {c: CLASSES[c - 1] for c in range(1, cfg.model.num_classes) if c - 1 < len(CLASSES)}
        pr_curves(records, names, sidecar(out, ".pr.png"), cfg.eval.iou_threshold)
    return report


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


def write_class_csv(report: dict, path) -> None:
    rows = ["class,ap,small_ap,large_ap"]
    for name, ap in report["per_class"].items():
        rows.append(
            ",".join([name, _fmt(ap), _fmt(report["small"]["per_class"].get(name)), _fmt(report["large"]["per_class"].get(name))])
        )
    rows.append(",".join(["mAP", _fmt(report["mAP"]), _fmt(report["small"]["mAP"]), _fmt(report["large"]["mAP"])]))
    Path(path).write_text("\n".join(rows) + "\n")


def detections_for_image(model: FSSD, cfg: ExperimentConfig, image: np.ndarray) -> List[dict]:
    size = cfg.model.backbone.input_size
    if image.shape[:2] != (size, size):
        raise ValueError(f"image is {image.shape[1]}x{image.shape[0]}, the model expects {size}x{size}")
    dets = detect(model, image[None], cfg.eval)[0]
    out = []
    for d in dets:
        rec = d.to_dict()
        if d.category - 1 < len(CLASSES):
            rec["label"] = CLASSES[d.category - 1]
        out.append(rec)
    return out


def history_summary(history: List[Dict[str, float]], window: int = 50) -> dict:
    from .train import smoothed

    if not history:
        return {}
    s = smoothed([h["loss"] for h in history], window)
    i50 = min(49, len(s) - 1)
    return {
        "iterations": len(history),
        "first_loss": history[0]["loss"],
        "smoothed_at_50": float(s[i50]),
        "smoothed_final": float(s[-1]),
        "relative_drop": float(1.0 - s[-1] / s[i50]) if s[i50] > 0 else 0.0,
    }
