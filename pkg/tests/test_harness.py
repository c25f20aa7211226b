import json
import subprocess
import sys
import warnings

import numpy as np
import pytest

from fssd.harness import ablate as ab
from fssd.harness.checkpoint import Checkpoint, CheckpointError, decode, encode, load_checkpoint, load_state, save_checkpoint
from fssd.harness.cli import main
from fssd.harness.config import ExperimentConfig, TrainConfig, load_config, save_config
from fssd.harness.runs import load_splits, model_from_checkpoint, run_eval, run_train
from fssd.harness.shapeworld import ShapeWorldSpec, SplitMix64, flip_horizontal, generate_dataset, read_dataset, render, write_dataset
from fssd.harness.train import batch_indices, build_model, smoothed, train
from fssd.model import FSSD
from fssd.tensor_core import SGD

from tiny import tiny_experiment

SMALL_SPEC = ShapeWorldSpec(seed=3, image_size=80, num_images=12, small_side=(6, 12), large_side=(20, 40))


# ---------------------------------------------------------------- dataset


def test_splitmix_reference_values():
    # first outputs for seed 0 of the published SplitMix64 generator
    g = SplitMix64(0)
    assert [g.next_u64() for _ in range(3)] == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


def test_same_seed_identical_bytes():
    a, b = generate_dataset(SMALL_SPEC), generate_dataset(SMALL_SPEC)
    assert a.images.tobytes() == b.images.tobytes()
    assert json.dumps(a.annotations()) == json.dumps(b.annotations())
    c = generate_dataset(ShapeWorldSpec(**{**SMALL_SPEC.to_dict(), "seed": 4}))
    assert a.images.tobytes() != c.images.tobytes()


def test_images_independent_of_range():
    full = generate_dataset(SMALL_SPEC)
    part = generate_dataset(SMALL_SPEC, 5, 3)
    assert part.ids == [5, 6, 7]
    assert part.images.tobytes() == full.images[5:8].tobytes()


@pytest.mark.parametrize("index", range(40))
def test_annotations_bound_their_pixels(index):
    spec = ShapeWorldSpec(seed=11)
    s = render(spec, index)
    n = spec.image_size
    assert 1 <= len(s.boxes) + s.dropped and len(s.boxes) <= spec.max_objects
    for k, box in enumerate(np.rint(s.boxes * n).astype(int), start=1):
        ys, xs = np.nonzero(s.instances == k)
        assert ys.size > 0
        assert (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1) == tuple(box)
    for i in range(len(s.boxes)):
        for j in range(i + 1, len(s.boxes)):
            from oracles import iou

            assert iou(s.boxes[i], s.boxes[j]) <= spec.max_iou + 1e-12
    assert set(s.labels.tolist()) <= {1, 2, 3}


def test_size_buckets_present():
    ds = generate_dataset(ShapeWorldSpec(seed=0, num_images=30))
    sides = np.rint(np.concatenate([np.maximum(b[:, 2] - b[:, 0], b[:, 3] - b[:, 1]) * 300 for b in ds.boxes]))
    assert np.any(sides <= 30) and np.any(sides >= 60)
    # rasterizing at pixel centers can trim an edge row from a triangle
    assert not np.any((sides > 30) & (sides < 58))


def test_write_read_round_trip(tmp_path):
    ds = generate_dataset(SMALL_SPEC)
    write_dataset(ds, tmp_path, SMALL_SPEC)
    back = read_dataset(tmp_path)
    assert back.images.tobytes() == ds.images.tobytes()
    assert back.ids == ds.ids
    assert all(np.array_equal(a, b) for a, b in zip(back.boxes, ds.boxes))
    assert json.loads((tmp_path / "spec.json").read_text())["seed"] == 3


def test_flip_twice_is_identity():
    ds = generate_dataset(SMALL_SPEC)
    for img, boxes in zip(ds.images, ds.boxes):
        f_img, f_boxes = flip_horizontal(img, boxes)
        assert f_boxes[:, 0].tolist() == pytest.approx((1 - boxes[:, 2]).tolist(), abs=1e-12)
        i2, b2 = flip_horizontal(f_img, f_boxes)
        assert i2.tobytes() == img.tobytes() and b2.tobytes() == boxes.tobytes()


def test_spec_validation():
    with pytest.raises(ValueError):
        ShapeWorldSpec(min_objects=0)
    with pytest.raises(ValueError):
        ShapeWorldSpec(image_size=100)


# ---------------------------------------------------------------- config


def test_config_round_trip(tmp_path):
    cfg = tiny_experiment()
    save_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json").to_dict() == cfg.to_dict()
    assert cfg.replace({"fusion.fusion_op": "sum"}).model.fusion.fusion_op.value == "sum"
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"bogus": {}})
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)


def test_default_schedule():
    t = TrainConfig()
    assert (t.lr, t.momentum, t.weight_decay, t.fusion_lr_multiplier) == (1e-3, 0.9, 5e-4, 2.0)
    assert t.lr_at(1499) == 1e-3 and t.lr_at(1500) == pytest.approx(1e-4)
    w = t.warm_start()
    assert w.iterations == 1000 and w.lr_steps == (750,)


def test_batches_cover_each_epoch_once():
    rows = np.concatenate([batch_indices(5, s, 4, 10) for s in range(5)])
    assert sorted(rows[:10].tolist()) == list(range(10))
    assert sorted(rows[10:20].tolist()) == list(range(10))


# ---------------------------------------------------------------- checkpoint


def some_checkpoint():
    rng = np.random.default_rng(0)
    t = {"a.weight": rng.standard_normal((3, 2, 3, 3)).astype(np.float32), "b": np.float32(rng.standard_normal(())), "c": np.zeros((0, 4), np.float32)}
    return Checkpoint(t, 17, {"x": [1, 2]}, "abc123")


def test_checkpoint_round_trip_bitwise(tmp_path):
    ck = some_checkpoint()
    save_checkpoint(tmp_path / "m.ckpt", ck)
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.step == 17 and back.config == {"x": [1, 2]} and back.config_hash == "abc123"
    assert back.tensors.keys() == ck.tensors.keys()
    for k in ck.tensors:
        assert np.asarray(ck.tensors[k]).tobytes() == back.tensors[k].tobytes()
        assert back.tensors[k].shape == np.shape(ck.tensors[k])
    assert encode(back) == encode(ck)


def test_checkpoint_layout_header():
    raw = encode(Checkpoint({"w": np.array([1.5], np.float32)}))
    assert raw[:4] == b"FSSD"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 2  # w plus the step counter
    assert raw[12:14] == (1).to_bytes(2, "little") and raw[14:15] == b"w"
    assert raw[15] == 1 and int.from_bytes(raw[16:20], "little") == 1
    assert np.frombuffer(raw[20:24], "<f4")[0] == 1.5


def test_truncated_checkpoint_names_offset():
    raw = encode(some_checkpoint())
    for cut in (2, 10, 30, len(raw) - 3):
        with pytest.raises(CheckpointError, match="offset"):
            decode(raw[:cut])


def test_corruption_detected():
    raw = bytearray(encode(some_checkpoint()))
    raw[40] ^= 0xFF
    with pytest.raises(CheckpointError, match="CRC"):
        decode(bytes(raw))
    with pytest.raises(CheckpointError, match="magic"):
        decode(b"XXXX" + bytes(raw[4:]))
    bad_version = bytes(raw[:4]) + (9).to_bytes(4, "little") + bytes(raw[8:])
    with pytest.raises(CheckpointError, match="version"):
        decode(bad_version)


def test_backbone_only_warm_start():
    cfg = tiny_experiment()
    donor = FSSD(cfg.model, seed=1)
    fresh = FSSD(cfg.model, seed=2)
    before = {k: v.copy() for k, v in fresh.state().items()}
    tensors = {k: v.astype(np.float32) for k, v in donor.state().items() if k.startswith("backbone.")}
    tensors["unrelated.thing"] = np.zeros(3, np.float32)
    rep = load_state(fresh, tensors)
    after = fresh.state()
    expected_loaded = {k for k in before if k in tensors}
    assert set(rep.loaded) == expected_loaded and rep.unexpected == ["unrelated.thing"]
    assert set(rep.missing) == set(before) - expected_loaded
    for k in before:
        if k in expected_loaded:
            assert np.array_equal(after[k], tensors[k].astype(after[k].dtype))
        else:
            assert after[k].tobytes() == before[k].tobytes()


def test_shape_mismatch_reported_not_raised():
    cfg = tiny_experiment()
    m = FSSD(cfg.model, seed=0)
    name = next(iter(m.state()))
    rep = load_state(m, {name: np.zeros((1,), np.float32)})
    assert rep.mismatched == [name]


# ---------------------------------------------------------------- training


def test_lr_zero_keeps_parameters():
    cfg = tiny_experiment(lr=0.0, iterations=5, weight_decay=5e-4)
    ds, _ = load_splits(cfg)
    res = train(cfg, ds)
    init = dict(build_model(cfg).named_parameters())
    assert all(init[k].data.tobytes() == p.data.tobytes() for k, p in res.model.named_parameters())


def first_step_deltas(multiplier):
    cfg = tiny_experiment(fusion_lr_multiplier=multiplier).replace({"model.dtype": "float64"})
    ds, _ = load_splits(cfg)
    from fssd.harness.train import train_step

    model = build_model(cfg).train()
    params = dict(model.named_parameters())
    before = {k: p.data.copy() for k, p in params.items()}
    opt = SGD(params, 0.9, 5e-4, model.lr_multipliers(multiplier))
    train_step(model, opt, cfg, ds, 0)
    return {k: params[k].data - before[k] for k in before}


def test_fusion_multiplier_scales_first_step():
    d1, d2 = first_step_deltas(1.0), first_step_deltas(2.0)
    fusion = [k for k in d1 if k.startswith("fusion.") and np.any(d1[k])]
    other = [k for k in d1 if not k.startswith("fusion.") and np.any(d1[k])]
    assert fusion and other
    for k in fusion:
        np.testing.assert_allclose(d2[k], 2.0 * d1[k], rtol=1e-9, atol=1e-15)
    for k in other:
        np.testing.assert_array_equal(d2[k], d1[k])


def test_resume_reproduces_trajectory(tmp_path):
    cfg = tiny_experiment(iterations=12, lr_steps=[8])
    ds, _ = load_splits(cfg)
    whole = train(cfg, ds)
    half = train(cfg, ds, stop_at=5)
    save_checkpoint(tmp_path / "h.ckpt", half.checkpoint(cfg))
    rest = train(cfg, ds, resume=load_checkpoint(tmp_path / "h.ckpt"))
    assert [h["loss"] for h in half.history + rest.history] == [h["loss"] for h in whole.history]
    assert encode(rest.checkpoint(cfg)) == encode(whole.checkpoint(cfg))


def test_resume_rejects_other_model():
    cfg = tiny_experiment(iterations=2)
    ds, _ = load_splits(cfg)
    ck = train(cfg, ds).checkpoint(cfg)
    other = cfg.replace({"fusion.fusion_op": "sum"})
    with pytest.raises(ValueError):
        train(other, ds, resume=ck)


@pytest.mark.parametrize("seed", range(3))
def test_short_run_reduces_loss(seed):
    cfg = tiny_experiment(iterations=200, lr_steps=[], seed=seed, warmup_iterations=20)
    ds, _ = load_splits(cfg)
    assert len(ds) == 64
    res = train(cfg, ds)
    s = smoothed([h["loss"] for h in res.history])
    assert s[-1] < res.history[0]["loss"]


def test_empty_training_set():
    cfg = tiny_experiment()
    ds, _ = load_splits(cfg)
    with pytest.raises(ValueError):
        train(cfg, ds.__class__(ds.images[:0], [], [], []))


# ---------------------------------------------------------------- files, eval, determinism


def test_run_train_and_eval_are_deterministic(tmp_path):
    cfg = tiny_experiment(iterations=6)
    paths = []
    for run in ("a", "b"):
        out = tmp_path / run / "m.ckpt"
        run_train(cfg, out)
        model, c = model_from_checkpoint(load_checkpoint(out))
        _, test = load_splits(c)
        run_eval(model, c, test, tmp_path / run / "report.json")
        paths.append(tmp_path / run)
    a, b = paths
    for name in ("m.ckpt", "report.json", "report.csv", "m.metrics.jsonl"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert (a / "m.loss.png").stat().st_size > 0 and (a / "report.pr.png").stat().st_size > 0
    rep = json.loads((a / "report.json").read_text())
    assert {"mAP", "per_class", "small", "large"} <= rep.keys()


def test_eval_hash_mismatch_warns(tmp_path):
    cfg = tiny_experiment(iterations=1)
    run_train(cfg, tmp_path / "m.ckpt", plot=False)
    other = cfg.replace({"fusion.fusion_op": "sum"})
    with pytest.warns(UserWarning, match="different model config"):
        model_from_checkpoint(load_checkpoint(tmp_path / "m.ckpt"), other)


def test_empty_split_is_an_error():
    cfg = tiny_experiment()
    model = build_model(cfg)
    _, test = load_splits(cfg)
    with pytest.raises(ValueError, match="empty"):
        run_eval(model, cfg, test.__class__(test.images[:0], [], [], []))


def test_trained_beats_untrained_on_training_split():
    cfg = tiny_experiment(iterations=300, lr_steps=[250], warmup_iterations=20)
    ds, _ = load_splits(cfg)
    trained = train(cfg, ds).model
    untrained = build_model(cfg)
    assert run_eval(trained, cfg, ds)["mAP"] > run_eval(untrained, cfg, ds)["mAP"]


def test_warm_start_uses_half_budget(tmp_path):
    cfg = tiny_experiment(iterations=8, lr_steps=[6])
    ck = train(cfg, load_splits(cfg)[0]).checkpoint(cfg)
    res = run_train(cfg, tmp_path / "w.ckpt", init=ck, plot=False)
    assert len(res.history) == 4 and res.history[3]["lr"] == pytest.approx(0.0005)
    assert not res.load_report.missing


# ---------------------------------------------------------------- ablation


def test_fusion_layer_cells_are_distinct_and_valid():
    base = tiny_experiment()
    cells = ab.fusion_layer_cells()
    assert len(cells) == 7
    keys = {(c.init, json.dumps(c.config(base).model.to_dict(), sort_keys=True)) for c in cells}
    assert len(keys) == 7
    for c in cells:
        FSSD(c.config(base).model, seed=0)


def test_pyramid_variant_cells_cover_variants():
    base = tiny_experiment()
    assert [c.config(base).model.fusion.pyramid_variant.value for c in ab.pyramid_variant_cells()] == ["A", "B", "C"]


def test_no_fusion_cell_builds():
    base = tiny_experiment()
    cfg = ab.no_fusion_cell(base).config(base)
    assert cfg.model.fusion.fusion_op.value == "none"
    FSSD(cfg.model, seed=0)


def test_parse_axes():
    base = tiny_experiment()
    assert len(ab.parse_axes("pyramid-variants+fusion-layers", base)) == 10
    assert [c.name for c in ab.parse_axes("no-fusion", base)] == ["fusion", "no-fusion"]
    grid = ab.parse_axes('fusion_op=concat,sum;source_layers=["conv4_3","fc_7"],["conv3_3","conv4_3","fc_7","conv7_2"]'.replace("fusion_op", "fusion.fusion_op").replace("source_layers", "fusion.source_layers"), base)
    assert len(grid) == 4
    assert grid[1].config(base).model.fusion.source_layers == ("conv3_3", "conv4_3", "fc_7", "conv7_2") or list(grid[1].config(base).model.fusion.source_layers) == ["conv3_3", "conv4_3", "fc_7", "conv7_2"]
    for bad in ("table9", "train.lr=1,2", "fusion.fusion_op="):
        with pytest.raises(ValueError):
            ab.parse_axes(bad, base)


def test_ablate_small_grid(tmp_path):
    base = tiny_experiment(iterations=4)
    cells = [ab.fusion_layer_cells()[4], ab.pyramid_variant_cells()[2]]
    res = ab.ablate(base, cells, tmp_path / "runs", warm_iterations=3)
    assert [r["cell"] for r in res.runs] == [c.name for c in cells]
    assert res.runs[0]["iterations"] == 3 and res.runs[0]["warm_loaded"] > 0
    assert all(r["mAP"] is not None for r in res.rows)
    ab.write_report(res, tmp_path / "report.json")
    assert (tmp_path / "report.csv").read_text().startswith("cell,")
    assert (tmp_path / "report.png").exists()
    assert "mAP" in ab.table_text(res)


# ---------------------------------------------------------------- CLI


def test_cli_priors(capsys):
    assert main(["priors", "--input-size", "300"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "8732" and lines[1].startswith("level,")
    assert main(["priors", "--input-size", "512"]) == 0
    assert capsys.readouterr().out.splitlines()[0] == "24564"


def test_cli_train_eval_detect(tmp_path, capsys):
    cfg = tiny_experiment(iterations=3)
    save_config(cfg, tmp_path / "c.json")
    ck = str(tmp_path / "m.ckpt")
    assert main(["train", "--config", str(tmp_path / "c.json"), "--out", ck, "--seed", "1"]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["iterations"] == 3
    assert main(["eval", "--ckpt", ck, "--split", "test", "--eleven-point", "--out", str(tmp_path / "r.json")]) == 0
    assert json.loads(capsys.readouterr().out)["interpolation"] == "eleven_point"
    from PIL import Image

    Image.fromarray(generate_dataset(SMALL_SPEC, 0, 1).images[0]).save(tmp_path / "x.png")
    assert main(["detect", "--ckpt", ck, "--image", str(tmp_path / "x.png"), "--out", str(tmp_path / "d.json")]) == 0
    assert "detections" in json.loads((tmp_path / "d.json").read_text())
    Image.new("RGB", (50, 50)).save(tmp_path / "bad.png")
    assert main(["detect", "--ckpt", ck, "--image", str(tmp_path / "bad.png")]) == 2


def test_cli_gen_data(tmp_path, capsys):
    (tmp_path / "s.json").write_text(json.dumps(SMALL_SPEC.to_dict()))
    assert main(["gen-data", "--spec", str(tmp_path / "s.json"), "--out", str(tmp_path / "d")]) == 0
    assert read_dataset(tmp_path / "d").images.tobytes() == generate_dataset(SMALL_SPEC).images.tobytes()


def test_cli_gradcheck_single_seed(capsys):
    assert main(["gradcheck", "--num-seeds", "1"]) == 0
    assert "checks passed" in capsys.readouterr().out


def test_cli_missing_file_exit_code(tmp_path):
    assert main(["eval", "--ckpt", str(tmp_path / "nope.ckpt")]) == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "fssd", "priors", "--input-size", "300"], capture_output=True, text=True, check=True)
    assert out.stdout.splitlines()[0] == "8732"
