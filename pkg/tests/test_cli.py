import csv
import json
import subprocess
import sys
import time

import numpy as np
import pytest
from PIL import Image

from coarse2fine.cli import main, parse
from coarse2fine.dataio import (
    DetectionRecord, load_manifest, read_detections, read_pgm, save_manifest, write_detections,
)
from coarse2fine.evaluation import placed_mask
from coarse2fine.geometry import contour_of
from coarse2fine.model import WeightVector
from coarse2fine.pipeline import TrainedModel

FAST = ["--samples", "2", "1", "1", "1", "--workers", "1"]


@pytest.mark.parametrize("command", [None, "synth", "train", "infer", "eval", "overlay"])
def test_help_exits_cleanly(command, capsys):
    with pytest.raises(SystemExit) as exc:
        main(([command] if command else []) + ["--help"])
    assert exc.value.code == 0
    assert "usage" in capsys.readouterr().out


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "coarse2fine.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "synth" in res.stdout


def test_four_layers_is_a_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--manifest", "m.txt", "--out", "x", "--layers", "4"])
    assert exc.value.code == 2
    assert "--layers" in capsys.readouterr().err


def test_invalid_synth_spec_fails_with_message(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "d"), "--train", "-1", "--test", "0"]) == 1
    assert "n_scenes" in capsys.readouterr().err


def test_config_file_sets_defaults_and_flags_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"C": 2.5, "layers": 2, "seed": 9}))
    a = parse(["train", "--manifest", "m", "--out", "o", "--config", str(cfg), "--seed", "4"])
    assert a.C == 2.5 and a.layers == 2 and a.seed == 4
    cfg.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(SystemExit):
        parse(["train", "--manifest", "m", "--out", "o", "--config", str(cfg)])


# ---------------------------------------------------------------------------
# a tiny dataset through every command


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["synth", "--out", str(data), "--train", "6", "--test", "3", "--size", "96", "--seed", "2"]) == 0
    model = root / "model"
    assert main(["train", "--manifest", str(data / "train/manifest.txt"), "--out", str(model),
                 "--max-iter", "30", *FAST]) == 0
    dets = root / "dets.txt"
    assert main(["infer", "--model", str(model), "--manifest", str(data / "test/manifest.txt"),
                 "--out", str(dets), "--workers", "1"]) == 0
    return root, data, model, dets


def test_synth_writes_both_splits_and_config(run):
    _, data, _, _ = run
    assert len(load_manifest(data / "train/manifest.txt").images) == 6
    assert len(load_manifest(data / "test/manifest.txt").images) == 3
    assert json.loads((data / "run_config.json").read_text())["seed"] == 2


def test_train_writes_weights_and_trace(run):
    _, _, model, _ = run
    m = TrainedModel.load(model)
    assert m.config.layers == 3 and m.weights.values.any()
    rows = list(csv.reader(open(model / "trace.csv")))
    assert len(rows) >= 2
    assert (model / "run_config.json").exists()


def test_retraining_with_same_seed_is_identical(run, tmp_path):
    _, data, model, _ = run
    assert main(["train", "--manifest", str(data / "train/manifest.txt"), "--out", str(tmp_path / "m"),
                 "--max-iter", "30", *FAST]) == 0
    assert WeightVector.load(tmp_path / "m/weights.bin") == WeightVector.load(model / "weights.bin")


def test_one_layer_training_converges(run, tmp_path, capsys):
    _, data, _, _ = run
    assert main(["train", "--manifest", str(data / "train/manifest.txt"), "--out", str(tmp_path / "m1"),
                 "--layers", "1", "--eps", "1e-4", *FAST]) == 0
    assert capsys.readouterr().out.startswith("converged after")
    assert TrainedModel.load(tmp_path / "m1").config.layers == 1


def test_infer_writes_foreground_detections(run):
    _, _, _, dets = run
    recs = read_detections(dets)
    assert all(r.v_bin is not None and r.viewpoint is not None for r in recs)
    # background wins ties, so every reported object beats it strictly
    assert all(r.energy > 0 for r in recs)


def test_infer_is_deterministic(run, tmp_path):
    _, data, model, dets = run
    again = tmp_path / "d.txt"
    assert main(["infer", "--model", str(model), "--manifest", str(data / "test/manifest.txt"),
                 "--out", str(again), "--workers", "1"]) == 0
    assert again.read_bytes() == dets.read_bytes()


def test_infer_without_proposals_writes_empty_file(run, tmp_path):
    _, data, model, _ = run
    m = load_manifest(data / "test/manifest.txt")
    m.proposals = []
    path = data / "test/no_props.txt"
    save_manifest(m, path)
    out = tmp_path / "none.txt"
    assert main(["infer", "--model", str(model), "--manifest", str(path), "--out", str(out), "--workers", "1"]) == 0
    assert out.read_text() == ""


def test_eval_of_ground_truth_scores_one(run, tmp_path):
    _, data, model, _ = run
    m = load_manifest(data / "test/manifest.txt")
    perfect = [DetectionRecord(a.image_id, a.box, 1.0, a.v_bin, a.viewpoint, a.subcat, a.finer)
               for a in m.annotations if a.o == 1]
    write_detections(tmp_path / "gt.txt", perfect)
    out = tmp_path / "report.txt"
    assert main(["eval", "--manifest", str(data / "test/manifest.txt"), "--detections", str(tmp_path / "gt.txt"),
                 "--out", str(out), "--model", str(model)]) == 0
    rows = dict(list(csv.reader(open(out.with_suffix(".csv"))))[1:])
    assert set(rows) >= {"Bounding Box", "Viewpoint", "Sub-category", "Sub-category & Viewpoint", "All"}
    assert all(float(v) == 1.0 for v in rows.values())
    assert "cad-alignment IoU: 100.0" in out.read_text()


def test_eval_of_model_detections(run, tmp_path):
    _, data, _, dets = run
    out = tmp_path / "r.txt"
    assert main(["eval", "--manifest", str(data / "test/manifest.txt"), "--detections", str(dets),
                 "--out", str(out)]) == 0
    rows = dict(list(csv.reader(open(out.with_suffix(".csv"))))[1:])
    ap = {k: float(v) for k, v in rows.items()}
    assert ap["Viewpoint"] >= ap["Sub-category & Viewpoint"] >= ap["All"]


def test_overlay_draws_the_projected_outline(run, tmp_path):
    _, data, model, dets = run
    out = tmp_path / "ov"
    assert main(["overlay", "--manifest", str(data / "test/manifest.txt"), "--detections", str(dets),
                 "--model", str(model), "--out", str(out)]) == 0
    m = load_manifest(data / "test/manifest.txt")
    tm = TrainedModel.load(model)
    reg = tm.registry()
    recs = read_detections(dets)
    assert recs
    for iid in {r.image_id for r in recs}:
        best = max((r for r in recs if r.image_id == iid), key=lambda r: r.energy)
        rgb = np.asarray(Image.open(out / f"{iid}.png"))
        gray = np.clip(read_pgm(m.image_path(iid)), 0, 255).astype(np.uint8)
        changed = (rgb != gray[..., None]).any(-1)
        rec = m.images[iid]
        cad = reg.finer[best.finer] if best.finer else reg.merged[best.subcat]
        outline = contour_of(placed_mask(cad, best.viewpoint, best.box, (rec.width, rec.height),
                                         tm.config.focal_for(rec.width, rec.height)))
        assert outline.any() and not (outline & ~changed).any()


def test_missing_model_reports_an_error(run, tmp_path, capsys):
    _, data, _, _ = run
    code = main(["infer", "--model", str(tmp_path / "nope"), "--manifest", str(data / "test/manifest.txt"),
                 "--out", str(tmp_path / "d.txt")])
    assert code == 1 and "error" in capsys.readouterr().err


@pytest.mark.slow
def test_pipeline_closure_on_fifty_scenes(tmp_path):
    t0 = time.perf_counter()
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data), "--train", "50", "--test", "10"]) == 0
    assert main(["train", "--manifest", str(data / "train/manifest.txt"), "--out", str(tmp_path / "m"),
                 "--workers", "1"]) == 0
    assert main(["infer", "--model", str(tmp_path / "m"), "--manifest", str(data / "test/manifest.txt"),
                 "--out", str(tmp_path / "d.txt"), "--workers", "1"]) == 0
    assert main(["eval", "--manifest", str(data / "test/manifest.txt"), "--detections", str(tmp_path / "d.txt"),
                 "--out", str(tmp_path / "r.txt"), "--model", str(tmp_path / "m")]) == 0
    assert time.perf_counter() - t0 < 600
