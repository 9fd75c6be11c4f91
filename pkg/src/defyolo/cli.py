"""Command-line entry point: ``defyolo <command> [options]``.

Exit codes: 0 success, 1 user error (bad flags, missing or malformed
inputs), 2 internal error. Run settings resolve as flag > config file >
profile > built-in default, and every run echoes where each value came from.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from pathlib import Path

THREADS_ENV = "DEFYOLO_THREADS"


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError(f"{self.prog}: {message}")


def _configure_threads() -> int:
    n = os.environ.get(THREADS_ENV, "1")
    try:
        if int(n) < 1:
            raise ValueError
    except ValueError:
        raise UserError(f"{THREADS_ENV} must be a positive integer, got {n!r}") from None
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[var] = n
    return int(n)


def _emit(obj) -> None:
    print(json.dumps(obj))


PACKAGED_CONFIGS = Path(__file__).parent / "configs"


def resolve_config_path(path) -> Path:
    """A file path, or the name of a shipped config (``baseline.cfg``, ``def-yolo``)."""
    p = Path(path)
    if p.exists():
        return p
    name = p.name if p.suffix == ".cfg" else p.name + ".cfg"
    if (PACKAGED_CONFIGS / name).exists() and p.parent == Path("."):
        return PACKAGED_CONFIGS / name
    return p


def _model_config(path, imgsz=None):
    from .model.config import baseline_config, load_config

    cfg = load_config(resolve_config_path(path)) if path else baseline_config()
    return cfg.replace(imgsz=imgsz) if imgsz else cfg


# ---------------------------------------------------------------------------
# run-config files


def _parse_run_file(path) -> dict:
    """``key = value`` lines naming TrainConfig fields."""
    from .train import TrainConfig

    path = Path(path)
    if not path.exists():
        raise UserError(f"run config not found: {path}")
    defaults = TrainConfig()
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UserError(f"{path}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in TrainConfig.field_names():
            raise UserError(f"{path}:{lineno}: unknown run setting {key!r}")
        out[key] = _coerce(key, val, getattr(defaults, key), f"{path}:{lineno}")
    return out


_OPTIONAL_TYPES = {"lr_final": float, "clip_norm": float, "width_multiple": float, "limit": int,
                   "max_steps": int, "model_config": str, "eval_split": str}


def _coerce(key, val, default, where):
    if val.lower() in ("none", "null", "") and key in _OPTIONAL_TYPES:
        return None
    typ = _OPTIONAL_TYPES.get(key) or type(default)
    try:
        if typ is bool:
            if val.lower() in ("1", "true", "yes", "on"):
                return True
            if val.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError
        return typ(val)
    except ValueError:
        raise UserError(f"{where}: bad value for {key}: {val!r}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(a) -> int:
    from .data.synth import SynthSceneConfig, split_counts, synth_dataset, write_dataset

    counts = (a.train, a.val, a.test) if a.train is not None else split_counts(a.count)
    if min(counts) <= 0:
        raise UserError(f"every split needs at least one image, got {counts}")
    cfg = SynthSceneConfig(seed=a.seed, width=a.width, height=a.height, delta=a.delta,
                           noise_sigma=a.noise_sigma)
    ds = synth_dataset(cfg, counts)
    write_dataset(ds, a.out)
    _emit({"out": str(a.out), "splits": dict(zip(("train", "val", "test"), counts)),
           "instances": ds.class_counts().tolist()})
    return 0


def cmd_convert(a) -> int:
    from .data.formats import read_annotations, write_annotations

    aset = read_annotations(a.src_format, a.input, image_dir=a.images)
    aset.validate()
    write_annotations(a.dst_format, aset, a.output)
    _emit({"images": len(aset.images), "boxes": len(aset.boxes), "from": a.src_format,
           "to": a.dst_format, "output": str(a.output)})
    return 0


def _resolve_train(a):
    from .train import TOY_PROFILE, TrainConfig

    values = {k: getattr(TrainConfig(), k) for k in TrainConfig.field_names()}
    sources = {k: "default" for k in values}
    if a.profile == "toy":
        for k, v in TOY_PROFILE.items():
            values[k], sources[k] = v, "profile:toy"
    if a.run_config:
        for k, v in _parse_run_file(a.run_config).items():
            values[k], sources[k] = v, "file"
    for k in TrainConfig.field_names():
        v = getattr(a, k, None)
        if v is not None:
            values[k], sources[k] = v, "flag"
    if a.config:
        values["model_config"] = str(a.config)
    return TrainConfig(**values), sources


def cmd_train(a) -> int:
    from . import plots
    from .train import ablation, ablation_table, train

    tc, sources = _resolve_train(a)
    if a.ablation:
        rows = ablation(tc, progress=_progress(a))
        print(ablation_table(rows))
        plots.ablation_bars(rows, Path(tc.out) / "plots" / "ablation.png")
        return 0
    mcfg = None
    if tc.model_config:
        mcfg = _model_config(tc.model_config)
        if sources["variant"] == "flag":
            from .train import model_config_for
            flags = model_config_for(tc)
            mcfg = mcfg.replace(deform_sppf=flags.deform_sppf, deform_c2f=flags.deform_c2f,
                                focal_loss=flags.focal_loss)
    res = train(tc, mcfg, sources, progress=_progress(a))
    plots.loss_curves(res.losses, res.out / "plots" / "loss.png")
    summary = {"out": str(res.out), "steps": res.steps, "variant": res.graph.config.variant,
               "final_loss": res.losses[-1]["total"] if res.losses else None}
    if res.report:
        plots.pr_curves(res.report, res.out / "plots" / "pr.png")
        print(res.report.to_table())
        summary.update(map50=res.report.map50, map50_95=res.report.map50_95)
    _emit(summary)
    return 0


def _progress(a):
    if not a.verbose:
        return None

    def show(rec):
        print(f"epoch {rec['epoch']} step {rec['step']} lr {rec['lr']:.5f} total {rec['total']:.4f}",
              file=sys.stderr)
    return show


def _load_graph(a):
    from .checkpoint import load
    from .model.graph import build

    cfg = _model_config(a.config, getattr(a, "imgsz", None))
    if getattr(a, "weights", None):
        return load(a.weights, cfg)
    return build(cfg, seed=getattr(a, "seed", 0))


def cmd_eval(a) -> int:
    from . import plots
    from .data.formats import parse_yolo
    from .metrics import map_range
    from .postprocess import read_detections_jsonl

    root = Path(a.data)
    img_dir, lbl_dir = root / a.split / "images", root / a.split / "labels"
    gt = parse_yolo(lbl_dir, image_dir=img_dir)
    gts = [(im.file, b.class_id, b.box) for im in gt.images for b in gt.boxes_for(im.id)]
    names = {im.file for im in gt.images}
    if a.pred:
        records = read_detections_jsonl(a.pred)
        unknown = [r[0] for r in records if r[0] not in names]
        if unknown:
            raise UserError(f"{a.pred}: image_id {unknown[0]!r} is not in split {a.split!r}")
        dets = [(im, d.class_id, d.confidence, d.box) for im, ds in records for d in ds]
        config = {"pred": str(a.pred)}
    else:
        from .postprocess import EVAL_CONF, EVAL_IOU, unletterbox
        from .train import load_split, predict

        graph = _load_graph(a)
        samples = load_split(root, a.split, graph.config.imgsz)
        preds = predict(graph, samples, conf=EVAL_CONF, iou=EVAL_IOU)
        dets = [(s.name, d.class_id, d.confidence, d.box) for s, ds in zip(samples, preds)
                for d in unletterbox(ds, s.transform)]
        config = {"weights": str(a.weights), "variant": graph.config.variant}
    report = map_range(dets, gts)
    report.config.update(config, split=a.split)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(report.to_json())
    plots.pr_curves(report, out / "pr.png")
    print(report.to_table())
    _emit({"map50": report.map50, "map50_95": report.map50_95, "out": str(out)})
    return 0


def cmd_infer(a) -> int:
    from PIL import Image, ImageDraw

    from .data.formats import IMAGE_SUFFIXES
    from .data.transforms import letterbox, read_gray, to_model_input
    from .model.config import CLASS_NAMES
    from .postprocess import Postprocessor, unletterbox, write_detections_jsonl
    from .tensor import Tensor, no_grad

    src = Path(a.source)
    if src.is_dir():
        files = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    elif src.exists():
        files = [src]
    else:
        raise UserError(f"source not found: {src}")
    if not files:
        raise UserError(f"no images in {src}")
    graph = _load_graph(a)
    graph.eval()
    cfg = graph.config
    post = Postprocessor(cfg.num_classes, cfg.reg_max, cfg.imgsz, conf=a.conf, iou=a.iou)
    out = Path(a.out)
    (out / "vis").mkdir(parents=True, exist_ok=True)
    records = []
    colors = [(230, 60, 60), (60, 160, 230), (240, 200, 40), (120, 220, 120)]
    for f in files:
        img = read_gray(f)
        lb, t = letterbox(img, cfg.imgsz)
        with no_grad():
            dets = unletterbox(post(graph(Tensor(to_model_input([lb], graph.dtype))))[0], t)
        records.append((f.name, dets))
        vis = Image.fromarray(img).convert("RGB")
        draw = ImageDraw.Draw(vis)
        for d in dets:
            draw.rectangle(d.box, outline=colors[d.class_id % 4], width=2)
            draw.text((d.box[0] + 2, d.box[1] + 1), f"{CLASS_NAMES[d.class_id]} {d.confidence:.2f}",
                      fill=colors[d.class_id % 4])
        vis.save(out / "vis" / (f.stem + ".png"))
    write_detections_jsonl(out / "detections.jsonl", records)
    _emit({"images": len(files), "detections": sum(len(d) for _, d in records),
           "out": str(out / "detections.jsonl")})
    return 0


def cmd_bench(a) -> int:
    from .metrics import bench

    graph = _load_graph(a)
    report = bench(graph, warmup=a.warmup, iters=a.iters, seed=a.seed)
    d = report.to_dict()
    if a.out:
        Path(a.out).parent.mkdir(parents=True, exist_ok=True)
        Path(a.out).write_text(json.dumps(d, indent=2))
    _emit(d)
    return 0


def inspect_rows(graph):
    from .model.graph import layer_flops

    rows = []
    for spec, (idx, kind, flops, shape) in zip(graph.layers, layer_flops(graph)):
        params = sum(t.data.size for _, t in spec.module.named_parameters()) if spec.module else 0
        shape = [list(s[1:]) for s in shape] if isinstance(shape, list) else list(shape[1:])
        rows.append({"index": idx, "from": list(spec.from_), "n": spec.repeats, "params": int(params),
                     "module": kind, "out": shape, "gflops": flops / 1e9})
    return rows


def cmd_inspect(a) -> int:
    from .model.graph import build, count_deform_blocks, count_flops, count_params

    cfg = _model_config(a.config, a.imgsz)
    graph = build(cfg)
    rows = inspect_rows(graph)
    summary = {"variant": cfg.variant, "params": count_params(graph), "params_m": count_params(graph) / 1e6,
               "gflops": count_flops(graph), "deform_blocks": count_deform_blocks(graph), "imgsz": cfg.imgsz}
    if a.json:
        _emit({**summary, "layers": rows})
        return 0
    print(f"{'idx':>3} {'from':>10} {'n':>2} {'params':>10}  {'module':<12} {'output':<28} {'GFLOPs':>8}")
    for r in rows:
        frm = ",".join(str(f) for f in r["from"])
        print(f"{r['index']:>3} {frm:>10} {r['n']:>2} {r['params']:>10}  {r['module']:<12} "
              f"{str(r['out']):<28} {r['gflops']:8.3f}")
    print(f"{cfg.variant}: {summary['params_m']:.3f} M params, {summary['gflops']:.1f} GFLOPs "
          f"@ {cfg.imgsz}, {summary['deform_blocks']} deformable blocks")
    _emit(summary)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    from .data.formats import FORMATS

    p = _Parser(prog="defyolo", description="Deformable YOLOv8 detector for thermal concealed-weapon scenes.")
    p.add_argument("-v", "--verbose", action="store_true", help="progress and debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic thermal dataset")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--count", type=int, default=100, help="total images, split 80/10/10")
    g.add_argument("--train", type=int)
    g.add_argument("--val", type=int)
    g.add_argument("--test", type=int)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--width", type=int, default=640)
    g.add_argument("--height", type=int, default=480)
    g.add_argument("--delta", type=float, default=25.0, help="min body-to-weapon intensity gap")
    g.add_argument("--noise-sigma", type=float, default=4.0)
    g.set_defaults(func=cmd_gen_data)

    c = sub.add_parser("convert", help="convert annotations between coco, voc and yolo")
    c.add_argument("--from", dest="src_format", required=True, choices=FORMATS)
    c.add_argument("--to", dest="dst_format", required=True, choices=FORMATS)
    c.add_argument("--input", required=True, type=Path, help="coco json file, or voc/yolo directory")
    c.add_argument("--output", required=True, type=Path)
    c.add_argument("--images", type=Path, help="image directory (yolo input needs image sizes)")
    c.set_defaults(func=cmd_convert)

    t = sub.add_parser("train", help="train a model (or the 4-row ablation ladder)")
    t.add_argument("--data", help="dataset root from gen-data")
    t.add_argument("--out")
    t.add_argument("--config", type=Path, help="model config file")
    t.add_argument("--run-config", type=Path, help="run settings file (key = value)")
    t.add_argument("--profile", choices=("toy",))
    t.add_argument("--variant", choices=("baseline", "deform-sppf", "deform-c2f", "def-yolo"))
    t.add_argument("--ablation", action="store_true")
    for name, typ in (("epochs", int), ("batch", int), ("lr0", float), ("lr_final", float),
                      ("warmup_epochs", float), ("momentum", float), ("weight_decay", float),
                      ("clip_norm", float), ("offset_lr_mult", float),
                      ("imgsz", int), ("width_multiple", float), ("seed", int), ("split", str),
                      ("limit", int), ("fliplr", float), ("max_steps", int), ("save_period", int),
                      ("eval_split", str)):
        t.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)
    t.add_argument("--no-jitter", dest="jitter", action="store_const", const=False)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="mAP report for a prediction file or a checkpoint")
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--split", default="val")
    e.add_argument("--pred", type=Path, help="detections JSON-lines (image_id = file name)")
    e.add_argument("--weights", type=Path)
    e.add_argument("--config", type=Path)
    e.add_argument("--out", default="runs/eval", type=Path)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="detect weapons in images")
    i.add_argument("--source", required=True, type=Path)
    i.add_argument("--weights", required=True, type=Path)
    i.add_argument("--config", type=Path)
    i.add_argument("--conf", type=float, default=0.25)
    i.add_argument("--iou", type=float, default=0.45)
    i.add_argument("--out", default="runs/infer", type=Path)
    i.set_defaults(func=cmd_infer)

    b = sub.add_parser("bench", help="batch-1 latency of forward + postprocess")
    b.add_argument("--config", type=Path)
    b.add_argument("--weights", type=Path)
    b.add_argument("--imgsz", type=int)
    b.add_argument("--warmup", type=int, default=20)
    b.add_argument("--iters", type=int, default=100)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", type=Path)
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("inspect", help="parameter count, GFLOPs and per-layer shapes")
    s.add_argument("--config", type=Path)
    s.add_argument("--imgsz", type=int)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    try:
        _configure_threads()
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "eval" and not args.pred and not args.weights:
            raise UserError("eval needs --pred or --weights")
        return args.func(args)
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except UserError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError) as e:
        # config, annotation, checkpoint and shape errors all derive from ValueError
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception:
        print("internal error:", file=sys.stderr)
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
