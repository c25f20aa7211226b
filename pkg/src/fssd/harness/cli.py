"""Command-line entry point: ``fssd <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np


def _config(path: Optional[str], seed: Optional[int] = None):
    from .config import ExperimentConfig, load_config

    cfg = load_config(path) if path else ExperimentConfig()
    if seed is not None:
        cfg = cfg.replace({"train.seed": seed})
    return cfg


def cmd_train(args) -> int:
    from .checkpoint import load_checkpoint
    from .runs import history_summary, run_train

    cfg = _config(args.config, args.seed)
    init = load_checkpoint(args.init_ckpt) if args.init_ckpt else None
    resume = load_checkpoint(args.resume) if args.resume else None

    def progress(rec):
        if rec["iter"] % args.log_every == 0:
            print(f"iter {rec['iter']:6d}  loss {rec['loss']:.4f}  conf {rec['conf']:.4f}  loc {rec['loc']:.4f}  lr {rec['lr']:.2e}", flush=True)

    res = run_train(cfg, Path(args.out), init=init, resume=resume, on_step=progress)
    if res.load_report is not None:
        r = res.load_report
        print(f"warm start: {len(r.loaded)} loaded, {len(r.missing)} missing, {len(r.mismatched)} shape-mismatched, {len(r.unexpected)} unused")
    print(json.dumps({"checkpoint": str(args.out), "step": res.step, **history_summary(res.history)}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .runs import load_splits, model_from_checkpoint, run_eval

    model, cfg = model_from_checkpoint(load_checkpoint(args.ckpt), _config(args.config) if args.config else None)
    if args.eleven_point:
        cfg = cfg.replace({"eval.eleven_point": True})
    train_ds, test_ds = load_splits(cfg)
    ds = test_ds if args.split == "test" else train_ds
    report = run_eval(model, cfg, ds, Path(args.out) if args.out else None)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_detect(args) -> int:
    from PIL import Image

    from .checkpoint import load_checkpoint
    from .runs import detections_for_image, model_from_checkpoint

    model, cfg = model_from_checkpoint(load_checkpoint(args.ckpt))
    if args.conf_threshold is not None:
        cfg = cfg.replace({"eval.conf_threshold": args.conf_threshold})
    image = np.asarray(Image.open(args.image).convert("RGB"))
    dets = detections_for_image(model, cfg, image)
    text = json.dumps({"image": str(args.image), "detections": dets}, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_ablate(args) -> int:
    from .ablate import ablate, parse_axes, table_text, write_report

    cfg = _config(args.config)
    cells = parse_axes(args.axes, cfg)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    if args.iterations is not None:
        cfg = cfg.replace({"train.iterations": args.iterations})

    def progress(run):
        print(f"{run['cell']} seed {run['seed']}: mAP {run.get('mAP')}", flush=True)

    out = Path(args.out)
    result = ablate(cfg, cells, out.parent / (out.stem + "-runs"), seeds=seeds, warm_iterations=args.warm_iterations, on_run=progress)
    write_report(result, out)
    print(table_text(result))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    seeds = range(args.seed, args.seed + args.num_seeds)

    def show(r):
        status = "ok  " if r.passed else "FAIL"
        print(f"{status} {r.check:28s} seed {r.seed:3d}  max rel err {r.max_rel_error:.3e}  (tol {r.tolerance:.0e})", flush=True)

    results = run_suite(seeds, args.tolerance, report=show)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_priors(args) -> int:
    from ..multibox import generate_priors, preset_specs

    specs = preset_specs(args.input_size)
    total = len(generate_priors(specs).boxes)
    print(total)
    print("level,size,per_location,priors,scale")
    for i, s in enumerate(specs):
        print(f"{i},{s.feature_size},{s.per_location},{s.feature_size ** 2 * s.per_location},{s.scale:.4f}")
    return 0


def cmd_gen_data(args) -> int:
    from .shapeworld import ShapeWorldSpec, generate_dataset, write_dataset

    spec = ShapeWorldSpec.from_dict(json.loads(Path(args.spec).read_text())) if args.spec else ShapeWorldSpec()
    ds = generate_dataset(spec)
    write_dataset(ds, args.out, spec)
    print(f"wrote {len(ds)} images, {sum(len(l) for l in ds.labels)} objects to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fssd", description="Feature-fusion single-shot detector toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a detector and write a checkpoint")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--init-ckpt", help="warm start by parameter name (warm-start budget applies)")
    t.add_argument("--resume", help="continue an interrupted run of the same config")
    t.add_argument("--seed", type=int)
    t.add_argument("--log-every", type=int, default=50)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="mAP report for a checkpoint")
    e.add_argument("--config", help="defaults to the config stored in the checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", choices=("test", "train"), default="test")
    e.add_argument("--eleven-point", action="store_true")
    e.add_argument("--out", help="write report JSON, per-class CSV and PR figure here")
    e.set_defaults(fn=cmd_eval)

    d = sub.add_parser("detect", help="detections for one PNG")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--image", required=True)
    d.add_argument("--conf-threshold", type=float)
    d.add_argument("--out")
    d.set_defaults(fn=cmd_detect)

    a = sub.add_parser("ablate", help="train and compare a grid of configurations")
    a.add_argument("--config")
    a.add_argument("--axes", required=True, help="fusion-layers, pyramid-variants, no-fusion (joined by +) or key=v1,v2;key2=...")
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", help="comma-separated seeds (default: the config's seed)")
    a.add_argument("--iterations", type=int, help="override the per-cell budget")
    a.add_argument("--warm-iterations", type=int, help="override the warm-start budget")
    a.set_defaults(fn=cmd_ablate)

    g = sub.add_parser("gradcheck", help="finite-difference suite over every kernel")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--num-seeds", type=int, default=10)
    g.add_argument("--tolerance", type=float, help="override every per-check tolerance")
    g.set_defaults(fn=cmd_gradcheck)

    r = sub.add_parser("priors", help="prior count and per-level breakdown")
    r.add_argument("--input-size", type=int, choices=(300, 512), required=True)
    r.set_defaults(fn=cmd_priors)

    s = sub.add_parser("gen-data", help="render the synthetic dataset to PNG + JSONL")
    s.add_argument("--spec")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen_data)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
