"""Training loop, evaluation helper and the four-row ablation ladder."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from .data.formats import parse_yolo
from .fpenv import flush_to_zero
from .data.transforms import hflip, intensity_jitter, letterbox, letterbox_boxes, read_gray, to_model_input
from .loss import DetectionLoss, total_loss
from .metrics import EvalReport, map_range
from .model.config import CLASS_NAMES, ModelConfig, baseline_config, format_config
from .model.graph import LayerGraph, build
from .optim import (DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY, NON_PAPER_DEFAULTS, OptimState,
                    clip_grad_norm, lr_schedule, sgd_step)
from .postprocess import EVAL_CONF, EVAL_IOU, Postprocessor
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

VARIANTS = ("baseline", "deform-sppf", "deform-c2f", "def-yolo")
ABLATION_LADDER = (
    ("YOLOv8", dict(deform_sppf=False, deform_c2f=False, focal_loss=False)),
    ("+Deform_SPPF", dict(deform_sppf=True, deform_c2f=False, focal_loss=False)),
    ("+Deform_C2f", dict(deform_sppf=True, deform_c2f=True, focal_loss=False)),
    ("+Focal loss", dict(deform_sppf=True, deform_c2f=True, focal_loss=True)),
)

# desk-scale preset: narrow network, half-size input, short schedule. On 64
# images batch 6 gives 11 steps per epoch; pair with max_steps=300.
TOY_PROFILE = dict(width_multiple=0.25, imgsz=320, epochs=30, warmup_epochs=1.0, batch=6, lr0=0.02,
                   fliplr=0.0, jitter=False)


@dataclass
class TrainConfig:
    data: str = "data/synth"
    out: str = "runs/train"
    model_config: str | None = None
    variant: str = "def-yolo"
    epochs: int = 200
    batch: int = 16
    lr0: float = 1e-2
    lr_final: float | None = None
    warmup_epochs: float = 30.0
    momentum: float = DEFAULT_MOMENTUM
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    clip_norm: float | None = 10.0
    offset_lr_mult: float = 0.1
    imgsz: int = 640
    width_multiple: float | None = None
    seed: int = 0
    split: str = "train"
    limit: int | None = None
    fliplr: float = 0.5
    jitter: bool = True
    max_steps: int | None = None
    save_period: int = 1
    eval_split: str | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.epochs <= 0 or self.batch <= 0:
            raise ValueError("epochs and batch must be positive")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("warmup_epochs must lie in [0, epochs]")
        if self.imgsz % 32:
            raise ValueError("imgsz must be a multiple of 32")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive (or None to disable)")
        if not 0 < self.offset_lr_mult <= 1:
            raise ValueError("offset_lr_mult must lie in (0, 1]")

    @property
    def effective_lr_final(self) -> float:
        return self.lr0 / 100 if self.lr_final is None else self.lr_final

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def model_config_for(tc: TrainConfig, base: ModelConfig | None = None) -> ModelConfig:
    cfg = base or baseline_config()
    flags = {v: d for v, d in zip(VARIANTS, (
        dict(deform_sppf=False, deform_c2f=False, focal_loss=False),
        dict(deform_sppf=True, deform_c2f=False, focal_loss=False),
        dict(deform_sppf=False, deform_c2f=True, focal_loss=False),
        dict(deform_sppf=True, deform_c2f=True, focal_loss=True)))}
    kw = dict(imgsz=tc.imgsz)
    if base is None:
        kw.update(flags[tc.variant])
    if tc.width_multiple is not None:
        kw["width_multiple"] = tc.width_multiple
    return cfg.replace(**kw)


# ---------------------------------------------------------------------------
# data


@dataclass
class Sample:
    name: str
    image: np.ndarray  # letterboxed uint8 (S, S)
    boxes: np.ndarray  # (M, 4) model-input pixels
    labels: np.ndarray  # (M,)
    original_boxes: np.ndarray = field(repr=False, default=None)
    transform: object = field(repr=False, default=None)


def load_split(root, split: str, imgsz: int, limit: int | None = None) -> list[Sample]:
    """Letterboxed images and YOLO labels from ``root/<split>/{images,labels}``."""
    root = Path(root)
    img_dir, lbl_dir = root / split / "images", root / split / "labels"
    if not img_dir.is_dir():
        raise FileNotFoundError(f"no images for split {split!r} under {root} (expected {img_dir})")
    aset = parse_yolo(lbl_dir, image_dir=img_dir)
    if limit is not None:
        aset.images = aset.images[:limit]
    groups = aset.by_image()
    out = []
    for im in aset.images:
        img, t = letterbox(read_gray(img_dir / im.file), imgsz)
        anns = groups.get(im.id, [])
        orig = np.array([a.box for a in anns], float).reshape(-1, 4)
        out.append(Sample(im.file, img, letterbox_boxes(orig, t), np.array([a.class_id for a in anns], int),
                          orig, t))
    if not out:
        raise FileNotFoundError(f"split {split!r} under {root} has no images")
    return out


def make_batch(samples: list[Sample], rng: np.random.Generator | None = None, fliplr: float = 0.0,
               jitter: bool = False, dtype=np.float32):
    images, targets = [], []
    for s in samples:
        img, boxes = s.image, s.boxes
        if rng is not None and fliplr > 0 and rng.random() < fliplr:
            img, boxes = hflip(img, boxes)
        if rng is not None and jitter:
            img = intensity_jitter(img, rng)
        images.append(img)
        targets.append((np.asarray(boxes, float).reshape(-1, 4), s.labels))
    return to_model_input(images, dtype), targets


# ---------------------------------------------------------------------------
# evaluation


def predict(graph: LayerGraph, samples: list[Sample], batch: int = 8, conf: float = EVAL_CONF,
            iou: float = EVAL_IOU):
    """Per-sample detections in model-input pixels."""
    cfg = graph.config
    post = Postprocessor(cfg.num_classes, cfg.reg_max, cfg.imgsz, conf=conf, iou=iou)
    graph.eval()
    out = []
    with no_grad():
        for i in range(0, len(samples), batch):
            x, _ = make_batch(samples[i:i + batch], dtype=graph.dtype)
            out.extend(post(graph(Tensor(x))))
    return out


def evaluate(graph: LayerGraph, samples: list[Sample], batch: int = 8, conf: float = EVAL_CONF,
             iou: float = EVAL_IOU) -> EvalReport:
    preds = predict(graph, samples, batch, conf, iou)
    dets = [(i, d.class_id, d.confidence, d.box) for i, ds in enumerate(preds) for d in ds]
    gts = [(i, int(c), tuple(b)) for i, s in enumerate(samples) for c, b in zip(s.labels, s.boxes)]
    report = map_range(dets, gts, graph.config.num_classes)
    report.config = {"conf": conf, "iou": iou, "variant": graph.config.variant}
    return report


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    graph: LayerGraph
    steps: int
    losses: list[dict]
    report: EvalReport | None
    out: Path


def batch_bounds(n: int, batch: int) -> list[tuple[int, int]]:
    """Index ranges of one epoch. A lone leftover image joins the previous
    batch, since batch-norm statistics over a single image can be degenerate."""
    bounds = [(i, min(i + batch, n)) for i in range(0, n, batch)]
    if batch > 1 and len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] == 1:
        bounds[-2:] = [(bounds[-2][0], n)]
    return bounds


def is_offset_param(name: str) -> bool:
    return ".offset." in name


def decay_mask(graph: LayerGraph) -> list[bool]:
    """Weight decay on conv kernels only; BN affine terms and biases are exempt."""
    return [not (name.endswith(".bias") or ".bn." in name) for name, _ in graph.named_parameters()]


def frozen_config(tc: TrainConfig, mcfg: ModelConfig, sources: dict | None = None) -> dict:
    d = asdict(tc)
    d["lr_final"] = tc.effective_lr_final
    return {
        "train": d,
        "model": format_config(mcfg),
        "variant": mcfg.variant,
        "non_paper_defaults": {k: d[k] for k in NON_PAPER_DEFAULTS},
        "sources": sources or {},
    }


def train(tc: TrainConfig, model_cfg: ModelConfig | None = None, sources: dict | None = None,
          samples: list[Sample] | None = None, progress=None) -> TrainResult:
    """Run SGD with warmup + cosine LR; writes a loss log, checkpoints and the frozen config."""
    mcfg = model_config_for(tc, model_cfg)
    out = Path(tc.out)
    (out / "weights").mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(frozen_config(tc, mcfg, sources), indent=2))

    if samples is None:
        samples = load_split(tc.data, tc.split, tc.imgsz, tc.limit)
    graph = build(mcfg, seed=tc.seed)
    loss_fn = DetectionLoss(mcfg.num_classes, mcfg.reg_max, mcfg.imgsz, focal=mcfg.focal_loss)
    params = graph.parameters()
    mask = decay_mask(graph)
    offset_idx = [i for i, (name, _) in enumerate(graph.named_parameters()) if is_offset_param(name)]
    opt = OptimState(lr=tc.lr0, momentum=tc.momentum, weight_decay=tc.weight_decay)
    rng = np.random.default_rng(tc.seed)
    per_epoch = len(batch_bounds(len(samples), tc.batch))
    total_steps = per_epoch * tc.epochs
    if tc.max_steps is not None:
        total_steps = min(total_steps, tc.max_steps)

    losses: list[dict] = []
    step = 0
    with open(out / "loss.jsonl", "w") as logf, flush_to_zero():
        for epoch in range(tc.epochs):
            order = rng.permutation(len(samples))
            graph.train()
            for b, (lo, hi) in enumerate(batch_bounds(len(samples), tc.batch)):
                if step >= total_steps:
                    break
                t0 = time.perf_counter()
                idx = order[lo:hi]
                x, targets = make_batch([samples[i] for i in idx], rng, tc.fliplr, tc.jitter)
                opt.lr = lr_schedule(epoch + (b + 1) / per_epoch, tc.warmup_epochs, tc.epochs, tc.lr0,
                                     tc.effective_lr_final)
                graph.zero_grad()
                heads = graph(Tensor(x))
                loss, parts, _ = total_loss(heads, targets, loss_fn, scale=len(idx))
                backward(loss)
                grads = [p.grad for p in params]
                # offsets get a smaller step; scaling before the clip keeps their
                # spikes from eating the whole clipped update
                for i in offset_idx:
                    if grads[i] is not None:
                        grads[i] *= tc.offset_lr_mult
                gnorm = clip_grad_norm(grads, tc.clip_norm) if tc.clip_norm else None
                sgd_step(params, grads, opt, mask)
                rec = {"epoch": epoch, "step": step, "lr": opt.lr, **parts.as_dict(),
                       "grad_norm": gnorm,
                       "time_s": round(time.perf_counter() - t0, 4)}
                logf.write(json.dumps(rec) + "\n")
                logf.flush()
                losses.append(rec)
                step += 1
                if progress:
                    progress(rec)
            last = step >= total_steps or epoch == tc.epochs - 1
            checkpoint.save(graph, out / "weights" / "last.defy")
            if tc.save_period and ((epoch + 1) % tc.save_period == 0 or last):
                checkpoint.save(graph, out / "weights" / f"epoch_{epoch + 1:03d}.defy")
            if last:
                break
    (out / "model.cfg").write_text(format_config(mcfg))

    report = None
    if tc.eval_split:
        eval_samples = samples if tc.eval_split == tc.split else load_split(tc.data, tc.eval_split, tc.imgsz)
        report = evaluate(graph, eval_samples)
        (out / "eval.json").write_text(report.to_json())
    return TrainResult(graph, step, losses, report, out)


def ablation(tc: TrainConfig, progress=None) -> list[dict]:
    """Train the four ladder rows with identical data and seed; one result row each."""
    samples = load_split(tc.data, tc.split, tc.imgsz, tc.limit)
    eval_split = tc.eval_split or tc.split
    eval_samples = samples if eval_split == tc.split else load_split(tc.data, eval_split, tc.imgsz)
    rows = []
    for name, flags in ABLATION_LADDER:
        sub = TrainConfig(**{**asdict(tc), "out": str(Path(tc.out) / name.strip("+").lower()),
                             "eval_split": None})
        mcfg = model_config_for(sub).replace(**flags)
        res = train(sub, mcfg, samples=samples, progress=progress)
        rep = evaluate(res.graph, eval_samples)
        rows.append({"row": name, **flags, "map50": rep.map50, "map50_95": rep.map50_95,
                     "ap50": {k: v.ap50 for k, v in rep.per_class.items()}, "steps": res.steps})
    with open(Path(tc.out) / "ablation.jsonl", "w") as f:
        for r in rows:
            f.write(json.dumps(r) + "\n")
    return rows


def ablation_table(rows: list[dict]) -> str:
    head = f"{'Model':<16}" + "".join(f"{n.capitalize():>10}" for n in CLASS_NAMES) + f"{'mAP@0.5':>10}{'mAP@.5:.95':>12}"
    lines = [head]
    for r in rows:
        cells = "".join(f"{100 * r['ap50'].get(n, float('nan')):10.1f}" for n in CLASS_NAMES)
        lines.append(f"{r['row']:<16}{cells}{100 * r['map50']:10.1f}{100 * r['map50_95']:12.1f}")
    return "\n".join(lines)
