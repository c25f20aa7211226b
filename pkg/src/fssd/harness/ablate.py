"""Ablation grids: named cell sets and explicit key=value grids, one training run per cell and seed."""

from __future__ import annotations

import csv
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import Checkpoint
from .config import ExperimentConfig
from .runs import history_summary, load_splits, run_eval, run_train

log = logging.getLogger(__name__)

INIT_MODES = ("scratch", "ssd", "backbone")

ALL_SOURCES = ("conv3_3", "conv4_3", "fc_7", "conv7_2")
SOURCE_SETS = {
    "conv3-conv7": ALL_SOURCES,
    "conv4-conv7": ("conv4_3", "fc_7", "conv7_2"),
    "conv4-fc7": ("conv4_3", "fc_7"),
}

# keys an explicit grid may vary
GRID_KEYS = {
    "fusion.fusion_op",
    "fusion.normalize_after_fusion",
    "fusion.source_layers",
    "fusion.pyramid_variant",
    "init",
    "train.seed",
}


@dataclass(frozen=True)
class Cell:
    name: str
    overrides: Tuple[Tuple[str, Any], ...] = ()
    init: str = "scratch"  # scratch | ssd (whole no-fusion model) | backbone (its backbone only)
    labels: Tuple[Tuple[str, str], ...] = ()  # display columns

    def __post_init__(self):
        if self.init not in INIT_MODES:
            raise ValueError(f"unknown init mode {self.init!r}")

    def config(self, base: ExperimentConfig) -> ExperimentConfig:
        over = dict(self.overrides)
        if "fusion.source_layers" in over and "fusion.projection_channels" not in over:
            width = base.model.fusion.projection_channels[0]
            over["fusion.projection_channels"] = [width] * len(over["fusion.source_layers"])
        return base.replace(over)


def _fusion_cell(name, bn, init, op, layers) -> Cell:
    return Cell(
        name,
        (
            ("fusion.normalize_after_fusion", bn),
            ("fusion.fusion_op", op),
            ("fusion.source_layers", list(SOURCE_SETS[layers])),
        ),
        init,
        (
            ("BN", "yes" if bn else "no"),
            ("init", init),
            ("fusion", op),
            ("fusion layers", layers),
        ),
    )


def fusion_layer_cells() -> List[Cell]:
    """The seven fusion-design rows: BN, initialization, fusion op and fused layer range."""
    rows = [
        (True, "scratch", "concat", "conv3-conv7"),
        (True, "ssd", "concat", "conv3-conv7"),
        (True, "ssd", "concat", "conv4-conv7"),
        (True, "ssd", "concat", "conv4-fc7"),
        (True, "backbone", "concat", "conv3-conv7"),
        (False, "ssd", "concat", "conv3-conv7"),
        (True, "ssd", "sum", "conv3-conv7"),
    ]
    return [
        _fusion_cell(f"{op}-{layers}-{'bn' if bn else 'nobn'}-{init}", bn, init, op, layers)
        for bn, init, op, layers in rows
    ]


def pyramid_variant_cells() -> List[Cell]:
    """Pyramid generator structures."""
    desc = {
        "A": "fused map predicts, simple blocks",
        "B": "simple block after fused map",
        "C": "bottleneck block after fused map",
    }
    return [
        Cell(f"pyramid-{v}", (("fusion.pyramid_variant", v),), "scratch", (("structure", desc[v]),))
        for v in ("A", "B", "C")
    ]


def no_fusion_cell(base: ExperimentConfig) -> Cell:
    """Plain SSD layout: detection maps come straight from the backbone taps."""
    taps = base.model.backbone.tap_sizes()
    sources = [n for n in ("conv4_3", "fc_7", "conv7_2") if n in taps]
    return Cell(
        "no-fusion",
        (("fusion.fusion_op", "none"), ("fusion.source_layers", sources)),
        "scratch",
        (("fusion", "none"),),
    )


def fusion_vs_baseline_cells(base: ExperimentConfig) -> List[Cell]:
    return [Cell("fusion", (), "scratch", (("fusion", base.model.fusion.fusion_op.value),)), no_fusion_cell(base)]


def _split_values(text: str) -> List[str]:
    """Split on top-level commas so JSON lists survive: ``a,[b,c]`` -> ``a``, ``[b,c]``."""
    out, depth, cur = [], 0, ""
    for ch in text:
        if ch in "[{":
            depth += 1
        elif ch in "]}":
            depth -= 1
        if ch == "," and depth == 0:
            out.append(cur)
            cur = ""
        else:
            cur += ch
    out.append(cur)
    return [v.strip() for v in out if v.strip()]


def _value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def grid_cells(spec: str) -> List[Cell]:
    """``key=v1,v2;key2=w1,w2`` -> Cartesian product of cells."""
    axes = []
    for part in spec.split(";"):
        if not part.strip():
            continue
        key, sep, values = part.partition("=")
        key = key.strip()
        if not sep or not values.strip():
            raise ValueError(f"malformed axis {part!r}; expected key=v1,v2")
        if key not in GRID_KEYS:
            raise ValueError(f"axis {key!r} is not ablatable; choose from {sorted(GRID_KEYS)}")
        axes.append((key, [_value(v) for v in _split_values(values)]))
    if not axes:
        raise ValueError("empty axis grid")
    cells = []
    for combo in itertools.product(*[vals for _, vals in axes]):
        over = []
        init = "scratch"
        for (key, _), v in zip(axes, combo):
            if key == "init":
                init = v
            else:
                over.append((key, v))
        name = ",".join(f"{k.split('.')[-1]}={json.dumps(v) if isinstance(v, list) else v}" for (k, _), v in zip(axes, combo))
        cells.append(Cell(name, tuple(over), init, tuple((k.split(".")[-1], str(v)) for (k, _), v in zip(axes, combo))))
    return cells


def parse_axes(spec: str, base: ExperimentConfig) -> List[Cell]:
    """Named sets (``fusion-layers``, ``pyramid-variants``, ``no-fusion``) joined by ``+``, or an explicit grid."""
    if "=" in spec:
        return grid_cells(spec)
    named = {
        "pyramid-variants": pyramid_variant_cells,
        "fusion-layers": fusion_layer_cells,
        "no-fusion": lambda: fusion_vs_baseline_cells(base),
    }
    cells: List[Cell] = []
    for name in spec.split("+"):
        name = name.strip()
        if name not in named:
            raise ValueError(f"unknown axis set {name!r}; choose from {sorted(named)} or key=v1,v2")
        cells.extend(named[name]())
    seen = set()
    unique = []
    for c in cells:
        if c.name not in seen:
            seen.add(c.name)
            unique.append(c)
    return unique


@dataclass
class AblationResult:
    rows: List[dict] = field(default_factory=list)
    runs: List[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"rows": self.rows, "runs": self.runs}


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def ablate(
    base: ExperimentConfig,
    cells: Sequence[Cell],
    out_dir,
    seeds: Optional[Sequence[int]] = None,
    warm_iterations: Optional[int] = None,
    evaluate: bool = True,
    on_run: Optional[Callable[[dict], None]] = None,
) -> AblationResult:
    """Train and evaluate every cell for every seed under a shared budget.

    Warm-started cells (``ssd`` / ``backbone``) draw on one no-fusion
    pre-training run per seed; that run uses the base budget, the warm
    cells the warm-start budget (``warm_iterations`` overrides it).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = list(seeds) if seeds is not None else [base.train.seed]
    configs = {c.name: c.config(base) for c in cells}
    train_ds, test_ds = load_splits(base)
    result = AblationResult()
    pretrained: Dict[int, Checkpoint] = {}

    def pretrain(seed: int) -> Checkpoint:
        if seed not in pretrained:
            cell = no_fusion_cell(base)
            cfg = cell.config(base).replace({"train.seed": seed})
            res = run_train(cfg, out_dir / f"pretrain-ssd-s{seed}.ckpt", train_ds=train_ds, plot=False)
            pretrained[seed] = res.checkpoint(cfg)
        return pretrained[seed]

    for cell in cells:
        for seed in seeds:
            cfg = configs[cell.name].replace({"train.seed": seed})
            if warm_iterations is not None:
                cfg = cfg.replace({"train.warm_start_iterations": warm_iterations})
            init = None
            if cell.init != "scratch":
                src = pretrain(seed)
                tensors = src.model_tensors()
                if cell.init == "backbone":
                    tensors = {k: v for k, v in tensors.items() if k.startswith("backbone.")}
                init = Checkpoint(tensors, 0, src.config, src.config_hash)
            ckpt_path = out_dir / f"{cell.name.replace('/', '_')}-s{seed}.ckpt"
            res = run_train(cfg, ckpt_path, init=init, train_ds=train_ds, plot=False)
            run = {"cell": cell.name, "seed": seed, "init": cell.init, **history_summary(res.history)}
            if res.load_report is not None:
                run["warm_loaded"] = len(res.load_report.loaded)
            if evaluate:
                rep = run_eval(res.model, cfg, test_ds)
                run.update(mAP=rep["mAP"], small_mAP=rep["small"]["mAP"], large_mAP=rep["large"]["mAP"])
            result.runs.append(run)
            if on_run:
                on_run(run)
            log.info("cell %s seed %d done", cell.name, seed)
    for cell in cells:
        runs = [r for r in result.runs if r["cell"] == cell.name]
        row = {"cell": cell.name, **dict(cell.labels), "seeds": len(runs)}
        for key in ("mAP", "small_mAP", "large_mAP", "smoothed_final"):
            row[key] = _mean(r.get(key) for r in runs)
        result.rows.append(row)
    return result


def write_report(result: AblationResult, path, figure: bool = True) -> Path:
    """JSON report plus a CSV table and a bar chart beside it."""
    from .runs import sidecar

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
    columns: List[str] = []
    for row in result.rows:
        for k in row:
            if k not in columns:
                columns.append(k)
    with open(sidecar(path, ".csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for row in result.rows:
            w.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in columns})
    if figure and result.rows and any(r.get("mAP") is not None for r in result.rows):
        from .plots import ablation_bars

        ablation_bars(result.rows, sidecar(path, ".png"))
    return path


def table_text(result: AblationResult) -> str:
    """Fixed-width rendering of the comparison table."""
    cols: List[str] = []
    for row in result.rows:
        for k in row:
            if k not in cols:
                cols.append(k)

    def fmt(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    cells = [[fmt(r.get(c)) for c in cols] for r in result.rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)
