"""COCO-style detection metrics and the inference latency benchmark."""

from __future__ import annotations

import json
import os
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .model.config import CLASS_NAMES

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def iou(box_a, box_b) -> float:
    ax1, ay1, ax2, ay2 = box_a
    bx1, by1, bx2, by2 = box_b
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    if area_a <= 0 or area_b <= 0:
        raise ValueError("iou: zero-area box")
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def _iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    aa = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    ab = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (aa[:, None] + ab[None, :] - inter)


def match(det_boxes, det_classes, gt_boxes, gt_classes, iou_thresh: float) -> np.ndarray:
    """TP flags for detections already sorted by descending confidence.

    Each detection takes the highest-IoU still-unmatched GT of its class with
    IoU >= ``iou_thresh``; every GT is matched at most once.
    """
    db = np.asarray(det_boxes, float).reshape(-1, 4)
    gb = np.asarray(gt_boxes, float).reshape(-1, 4)
    dc, gc = np.asarray(det_classes), np.asarray(gt_classes)
    ious = _iou_matrix(db, gb)
    taken = np.zeros(len(gb), bool)
    tp = np.zeros(len(db), bool)
    for i in range(len(db)):
        if len(gb) == 0:
            break
        cand = np.where((gc == dc[i]) & ~taken & (ious[i] >= iou_thresh), ious[i], -1.0)
        j = int(np.argmax(cand))
        if cand[j] >= 0:
            taken[j] = True
            tp[i] = True
    return tp


def pr_curve(tp_flags, confidences, num_gt: int):
    """Cumulative precision/recall in descending-confidence order (stable on ties)."""
    tp = np.asarray(tp_flags, bool)
    order = np.argsort(-np.asarray(confidences, float), kind="stable")
    tp = tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    precision = ctp / np.maximum(ctp + cfp, 1)
    recall = ctp / num_gt if num_gt else np.zeros_like(precision, dtype=float)
    return precision, recall, np.asarray(confidences, float)[order]


def average_precision(tp_flags, confidences, num_gt: int) -> float | None:
    """101-point interpolated AP; ``None`` when the class has no ground truth."""
    if num_gt == 0:
        return None
    if len(tp_flags) == 0:
        return 0.0
    precision, recall, _ = pr_curve(tp_flags, confidences, num_gt)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    ap50: float
    ap50_95: float
    instances: int


@dataclass
class EvalReport:
    per_class: dict[str, ClassMetrics]
    all: ClassMetrics
    images: int
    instances: int
    ap_per_threshold: dict[str, list[float]] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict, repr=False)

    @property
    def map50(self) -> float:
        return self.all.ap50

    @property
    def map50_95(self) -> float:
        return self.all.ap50_95

    def to_dict(self) -> dict:
        return {
            "images": self.images, "instances": self.instances,
            "all": asdict(self.all),
            "per_class": {k: asdict(v) for k, v in self.per_class.items()},
            "ap_per_threshold": self.ap_per_threshold,
            "iou_thresholds": list(IOU_THRESHOLDS),
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        """Aligned text table: rows per model, column groups P / R / mAP@0.5 / mAP@0.5:0.95."""
        cols = ["A"] + [n[0].upper() for n in CLASS_NAMES]
        keys = ["all"] + list(CLASS_NAMES)
        head1 = f"{'Metric':<10}" + "".join(f"{g:^31}" for g in ("Precision", "Recall", "mAP@0.5", "mAP@(0.5:0.95)"))
        head2 = f"{'Classes':<10}" + ("".join(f"{c:>6}" for c in cols) + " ") * 4
        vals = []
        for attr in ("precision", "recall", "ap50", "ap50_95"):
            for k in keys:
                m = self.all if k == "all" else self.per_class.get(k)
                vals.append("   -  " if m is None else f"{100 * getattr(m, attr):6.1f}")
            vals.append(" ")
        row = f"{'model':<10}" + "".join(vals)
        return "\n".join([head1, head2, row])


def _f1_operating_point(precision, recall):
    if len(precision) == 0:
        return 0.0, 0.0
    f1 = 2 * precision * recall / np.maximum(precision + recall, 1e-16)
    i = int(np.argmax(f1))
    return float(precision[i]), float(recall[i])


def map_range(dets, gts, num_classes: int = 4, class_names=CLASS_NAMES,
              iou_thresholds=IOU_THRESHOLDS) -> EvalReport:
    """Evaluate detections against ground truth.

    ``dets``: iterable of ``(image_id, class_id, confidence, box)``;
    ``gts``: iterable of ``(image_id, class_id, box)``. Classes without any
    ground truth are left out of the "all" means.
    """
    dets = list(dets)
    gts = list(gts)
    if not gts:
        raise ValueError("map_range: empty ground-truth set")
    image_ids = list(dict.fromkeys([g[0] for g in gts] + [d[0] for d in dets]))
    img_index = {im: i for i, im in enumerate(image_ids)}
    per_class: dict[str, ClassMetrics] = {}
    ap_table: dict[str, list[float]] = {}
    curves = {}
    for c in range(num_classes):
        name = class_names[c]
        g_by_img: dict = {}
        for im, gc, box in gts:
            if gc == c:
                g_by_img.setdefault(im, []).append(box)
        num_gt = sum(len(v) for v in g_by_img.values())
        d_by_img: dict = {}
        for k, (im, dc, conf, box) in enumerate(dets):
            if dc == c:
                d_by_img.setdefault(im, []).append((conf, k, box))
        if num_gt == 0:
            continue
        # global order: confidence desc, then image order, then input order
        flat = sorted(((conf, img_index[im], k, im, box) for im, lst in d_by_img.items()
                       for conf, k, box in lst), key=lambda r: (-r[0], r[1], r[2]))
        confs = np.array([r[0] for r in flat], float)
        rows_by_img: dict = {}
        for i, r in enumerate(flat):
            rows_by_img.setdefault(r[3], []).append(i)
        aps = []
        tps = {}
        for t in iou_thresholds:
            tp = np.zeros(len(flat), bool)
            for im, rows in rows_by_img.items():
                boxes = [flat[i][4] for i in rows]
                gb = g_by_img.get(im, [])
                tp[rows] = match(boxes, [c] * len(boxes), gb, [c] * len(gb), t)
            tps[t] = tp
            aps.append(average_precision(tp, confs, num_gt))
        p, r, _ = pr_curve(tps[iou_thresholds[0]], confs, num_gt)
        prec, rec = _f1_operating_point(p, r)
        per_class[name] = ClassMetrics(prec, rec, aps[0], float(np.mean(aps)), num_gt)
        ap_table[name] = aps
        curves[name] = {"precision": p.tolist(), "recall": r.tolist()}
    if not per_class:
        raise ValueError("map_range: no class has ground truth")
    ms = list(per_class.values())
    all_m = ClassMetrics(
        float(np.mean([m.precision for m in ms])), float(np.mean([m.recall for m in ms])),
        float(np.mean([m.ap50 for m in ms])), float(np.mean([m.ap50_95 for m in ms])),
        sum(m.instances for m in ms))
    return EvalReport(per_class, all_m, len({g[0] for g in gts}), len(gts), ap_table, curves=curves)


# ---------------------------------------------------------------------------
# benchmark


@dataclass
class BenchReport:
    mean_ms: float
    median_ms: float
    p95_ms: float
    fps: float
    warmup: int
    iters: int
    threads: int
    variant: str = ""
    input_shape: tuple = ()

    def to_dict(self) -> dict:
        return asdict(self)


def thread_count() -> int:
    return int(os.environ.get("DEFYOLO_THREADS", "1"))


def bench(graph, input_shape=None, warmup: int = 20, iters: int = 100, postprocessor=None,
          seed: int = 0) -> BenchReport:
    """Wall-clock latency of forward + postprocess at batch 1, inference mode."""
    from .postprocess import Postprocessor
    from .tensor import Tensor, no_grad

    cfg = graph.config
    input_shape = tuple(input_shape or (1, 3, cfg.imgsz, cfg.imgsz))
    if input_shape[0] != 1:
        raise ValueError("bench measures batch 1")
    post = postprocessor or Postprocessor(cfg.num_classes, cfg.reg_max, cfg.imgsz)
    x = Tensor(np.random.default_rng(seed).random(input_shape).astype(graph.dtype))
    graph.eval()
    times = []
    with no_grad():
        for i in range(warmup + iters):
            t0 = time.perf_counter()
            post(graph(x))
            dt = (time.perf_counter() - t0) * 1000
            if i >= warmup:
                times.append(dt)
    mean = statistics.fmean(times)
    return BenchReport(mean, statistics.median(times), float(np.percentile(times, 95)),
                       1000.0 / mean, warmup, iters, thread_count(), cfg.variant, input_shape)
