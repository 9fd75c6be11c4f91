import json

import numpy as np
import pytest

from defyolo import cli
from defyolo.data.formats import parse_coco, parse_voc, parse_yolo
from defyolo.loss import combine

TINY = ["--imgsz", "64", "--width-multiple", "0.125", "--epochs", "2", "--batch", "2",
        "--warmup-epochs", "1", "--save-period", "1"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def last_json(text):
    return json.loads(text.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds") / "synth"
    assert cli.main(["gen-data", "--out", str(root), "--train", "4", "--val", "2", "--test", "2",
                     "--seed", "5"]) == 0
    return root


def test_inspect_baseline(capsys):
    code, out, _ = run(capsys, "inspect", "--config", "baseline.cfg")
    assert code == 0
    s = last_json(out)
    assert s["params_m"] == pytest.approx(11.137, rel=0.01)
    assert s["gflops"] == pytest.approx(28.7, rel=0.05)
    assert "SPPF" in out and "Detect" in out


def test_inspect_def_yolo_json(capsys):
    code, out, _ = run(capsys, "inspect", "--config", "def-yolo", "--json", "--imgsz", "320")
    s = last_json(out)
    assert code == 0 and s["deform_blocks"] == 7 and s["variant"] == "def-yolo"
    assert len(s["layers"]) == 23


def test_exit_codes(capsys, monkeypatch, tmp_path):
    assert run(capsys, "frobnicate")[0] == 1
    assert run(capsys, "inspect", "--config", tmp_path / "nope.cfg")[0] == 1
    assert run(capsys, "eval", "--data", tmp_path)[0] == 1
    assert run(capsys, "--help")[0] == 0

    def boom(a):
        raise RuntimeError("bug")

    monkeypatch.setattr(cli, "cmd_inspect", boom)
    parser = cli.build_parser
    monkeypatch.setattr(cli, "build_parser", lambda: _with_func(parser(), "inspect", boom))
    code, _, err = run(capsys, "inspect")
    assert code == 2 and "internal error" in err


def _with_func(p, name, fn):
    p._subparsers._group_actions[0].choices[name].set_defaults(func=fn)
    return p


def test_thread_env_validated(capsys, monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "zero")
    assert run(capsys, "inspect")[0] == 1


def test_gen_data_layout(dataset):
    assert (dataset / "train.txt").exists() and (dataset / "dataset.json").exists()
    assert len(list((dataset / "train" / "images").glob("*.png"))) == 4


def test_convert_round_trip(capsys, dataset, tmp_path):
    lbl = dataset / "train" / "labels"
    assert run(capsys, "convert", "--from", "yolo", "--to", "coco", "--input", lbl,
               "--output", tmp_path / "a.json")[0] == 0
    assert run(capsys, "convert", "--from", "coco", "--to", "voc", "--input", tmp_path / "a.json",
               "--output", tmp_path / "voc")[0] == 0
    src = parse_yolo(lbl)
    back = parse_voc(tmp_path / "voc")
    assert len(back.boxes) == len(src.boxes) == len(parse_coco(tmp_path / "a.json").boxes)
    for a, b in zip(src.boxes, back.boxes):
        assert np.max(np.abs(np.subtract(a.box, b.box))) <= 1.0
    assert run(capsys, "convert", "--from", "coco", "--to", "yolo", "--input",
               tmp_path / "missing.json", "--output", tmp_path / "y")[0] == 1


def test_eval_ground_truth_as_predictions(capsys, dataset, tmp_path):
    gt = parse_yolo(dataset / "val" / "labels")
    with open(tmp_path / "pred.jsonl", "w") as f:
        for im in gt.images:
            dets = [{"class": b.class_id, "conf": 1.0, "box": list(b.box)} for b in gt.boxes_for(im.id)]
            f.write(json.dumps({"image_id": im.file, "detections": dets}) + "\n")
    code, out, _ = run(capsys, "eval", "--data", dataset, "--split", "val", "--pred",
                       tmp_path / "pred.jsonl", "--out", tmp_path / "ev")
    assert code == 0
    s = last_json(out)
    assert s["map50"] == 1.0 and s["map50_95"] == 1.0
    report = json.loads((tmp_path / "ev" / "eval.json").read_text())
    assert report["all"]["precision"] == 1.0 and report["all"]["recall"] == 1.0
    assert (tmp_path / "ev" / "pr.png").exists()
    assert "Precision" in out and "mAP@0.5" in out


def test_eval_unknown_image(capsys, dataset, tmp_path):
    (tmp_path / "p.jsonl").write_text(json.dumps({"image_id": "zzz.png", "detections": []}) + "\n")
    assert run(capsys, "eval", "--data", dataset, "--split", "val", "--pred", tmp_path / "p.jsonl",
               "--out", tmp_path / "ev")[0] == 1


def _strip_time(path):
    recs = [json.loads(line) for line in open(path)]
    for r in recs:
        r.pop("time_s")
    return recs


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    outs = []
    for k in range(2):
        out = tmp_path_factory.mktemp("run") / f"r{k}"
        assert cli.main(["train", "--data", str(dataset), "--out", str(out), "--variant", "def-yolo",
                         "--eval-split", "train", *TINY]) == 0
        outs.append(out)
    return outs


def test_train_outputs(trained):
    out = trained[0]
    for name in ("config.json", "loss.jsonl", "model.cfg", "eval.json", "weights/last.defy",
                 "weights/epoch_001.defy", "weights/epoch_002.defy", "plots/loss.png"):
        assert (out / name).exists(), name
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["variant"] == "def-yolo"
    assert set(cfg["non_paper_defaults"]) == {"momentum", "weight_decay", "lr_final", "clip_norm",
                                              "offset_lr_mult"}
    assert cfg["sources"]["epochs"] == "flag" and cfg["sources"]["momentum"] == "default"


def test_loss_log_recombines(trained):
    recs = _strip_time(trained[0] / "loss.jsonl")
    assert len(recs) == 4
    for r in recs:
        assert r["total"] == combine(r["box"], r["cls"], r["dfl"], r["focal"])
        assert r["focal"] > 0


def test_train_rerun_bit_exact(trained):
    a, b = trained
    assert _strip_time(a / "loss.jsonl") == _strip_time(b / "loss.jsonl")
    assert (a / "weights" / "last.defy").read_bytes() == (b / "weights" / "last.defy").read_bytes()
    assert (a / "eval.json").read_text() == (b / "eval.json").read_text()


def test_run_config_precedence(capsys, dataset, tmp_path):
    (tmp_path / "run.cfg").write_text("epochs = 4\nbatch = 4\nlr0 = 0.005\n")
    out = tmp_path / "p"
    code, _, _ = run(capsys, "train", "--data", dataset, "--out", out, "--profile", "toy",
                     "--run-config", tmp_path / "run.cfg", "--batch", "2", "--imgsz", "64",
                     "--width-multiple", "0.125", "--max-steps", "1", "--variant", "baseline",
                     "--clip-norm", "5")
    assert code == 0
    cfg = json.loads((out / "config.json").read_text())
    t, src = cfg["train"], cfg["sources"]
    assert (t["batch"], src["batch"]) == (2, "flag")
    assert (t["lr0"], src["lr0"]) == (0.005, "file")
    assert (t["warmup_epochs"], src["warmup_epochs"]) == (1.0, "profile:toy")
    assert (t["jitter"], src["jitter"]) == (False, "profile:toy")
    assert src["momentum"] == "default"
    assert (t["clip_norm"], src["clip_norm"]) == (5.0, "flag")
    rec = json.loads((out / "loss.jsonl").read_text().splitlines()[0])
    assert rec["grad_norm"] > 0
    (tmp_path / "short.cfg").write_text("epochs = 1\nwarmup_epochs = 2\n")
    code, _, err = run(capsys, "train", "--data", dataset, "--out", tmp_path / "q", "--profile", "toy",
                       "--run-config", tmp_path / "short.cfg")
    assert code == 1 and "warmup_epochs" in err
    (tmp_path / "bad.cfg").write_text("nonsense = 3\n")
    assert run(capsys, "train", "--data", dataset, "--run-config", tmp_path / "bad.cfg")[0] == 1


def test_infer_and_bench(capsys, trained, dataset, tmp_path):
    w = trained[0] / "weights" / "last.defy"
    cfg = trained[0] / "model.cfg"
    code, out, _ = run(capsys, "infer", "--source", dataset / "test" / "images", "--weights", w,
                       "--config", cfg, "--conf", "0.001", "--out", tmp_path / "inf")
    assert code == 0 and last_json(out)["images"] == 2
    lines = (tmp_path / "inf" / "detections.jsonl").read_text().splitlines()
    assert len(lines) == 2 and len(list((tmp_path / "inf" / "vis").glob("*.png"))) == 2
    code, out, _ = run(capsys, "bench", "--config", cfg, "--weights", w, "--warmup", "1",
                       "--iters", "2", "--out", tmp_path / "b.json")
    rep = json.loads((tmp_path / "b.json").read_text())
    assert code == 0 and rep["fps"] == pytest.approx(1000 / rep["mean_ms"])
    # a baseline config cannot load DEF-YOLO weights
    base = tmp_path / "base.cfg"
    base.write_text(cfg.read_text().replace("deform_sppf = true", "deform_sppf = false")
                    .replace("deform_c2f = true", "deform_c2f = false"))
    code, _, err = run(capsys, "bench", "--config", base, "--weights", w, "--iters", "1")
    assert code == 1 and "shape mismatch at tensor" in err
