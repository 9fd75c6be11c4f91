"""Raw head maps -> final detections: DFL decoding, filtering, NMS, letterbox inversion."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .loss import Anchors, dist_expectation, make_anchor_points, split_head
from .model.config import DETECT_STRIDES

INFER_CONF, INFER_IOU = 0.25, 0.45
EVAL_CONF, EVAL_IOU = 0.001, 0.7
MAX_DET = 300


@dataclass
class Detection:
    class_id: int
    confidence: float
    box: tuple[float, float, float, float]

    def to_dict(self) -> dict:
        return {"class": int(self.class_id), "conf": float(self.confidence),
                "box": [float(v) for v in self.box]}


@dataclass(frozen=True)
class LetterboxTransform:
    """Maps original-image pixels to model-input pixels: ``p * scale + pad``."""
    scale: float
    pad: tuple[float, float]  # (left, top)
    original: tuple[int, int]  # (w, h)

    def to_model(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, float)
        return xy * self.scale + np.resize(np.asarray(self.pad, float), xy.shape[-1])

    def to_original(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, float)
        return (xy - np.resize(np.asarray(self.pad, float), xy.shape[-1])) / self.scale

    def to_dict(self) -> dict:
        return {"scale": self.scale, "pad": list(self.pad), "original": list(self.original)}


def decode_dfl(dist_logits: np.ndarray) -> np.ndarray:
    """Expected bin index per side: ``(..., 4, R) -> (..., 4)``."""
    x = np.asarray(dist_logits, float)
    # softmax weights can sum to 1 + ulp, pushing the top bin a hair past R - 1
    return np.clip(dist_expectation(x)[1], 0.0, x.shape[-1] - 1)


def distances_to_box(centers, strides, ltrb) -> np.ndarray:
    """``(cx - l*s, cy - t*s, cx + r*s, cy + b*s)`` for stride ``s``."""
    c = np.asarray(centers, float)
    s = np.asarray(strides, float)[..., None]
    d = np.asarray(ltrb, float)
    return np.concatenate([c - d[..., :2] * s, c + d[..., 2:] * s], axis=-1)


def box_to_distances(centers, strides, boxes) -> np.ndarray:
    c = np.asarray(centers, float)
    s = np.asarray(strides, float)[..., None]
    b = np.asarray(boxes, float)
    return np.concatenate([c - b[..., :2], b[..., 2:] - c], axis=-1) / s


def _iou_one_to_many(box: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    iw = np.minimum(box[2], boxes[:, 2]) - np.maximum(box[0], boxes[:, 0])
    ih = np.minimum(box[3], boxes[:, 3]) - np.maximum(box[1], boxes[:, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = (box[2] - box[0]) * (box[3] - box[1]) + (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1]) - inter
    return inter / np.maximum(union, 1e-12)


def nms_indices(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray,
                iou_threshold: float = INFER_IOU, class_aware: bool = True,
                max_det: int = MAX_DET) -> np.ndarray:
    """Greedy NMS on arrays; returns kept indices in descending score order.

    Ties in score keep the lower original index first. A box is suppressed by
    a kept box of the same class (any class when ``class_aware`` is off)
    whose IoU exceeds ``iou_threshold``.
    """
    order = np.argsort(-np.asarray(scores), kind="stable")
    boxes = np.asarray(boxes, float)
    alive = np.ones(len(order), bool)
    keep = []
    for pos, i in enumerate(order):
        if not alive[pos]:
            continue
        keep.append(i)
        if len(keep) >= max_det:
            break
        rest = order[pos + 1:]
        if rest.size == 0:
            break
        over = _iou_one_to_many(boxes[i], boxes[rest]) > iou_threshold
        if class_aware:
            over &= classes[rest] == classes[i]
        alive[pos + 1:] &= ~over
    return np.asarray(keep, dtype=np.int64)


def nms(detections: list[Detection], iou_threshold: float = INFER_IOU,
        conf_threshold: float = INFER_CONF, class_aware: bool = True,
        max_det: int = MAX_DET) -> list[Detection]:
    dets = [d for d in detections if d.confidence >= conf_threshold]
    if not dets:
        return []
    boxes = np.array([d.box for d in dets], float)
    keep = nms_indices(boxes, np.array([d.confidence for d in dets]),
                       np.array([d.class_id for d in dets]), iou_threshold, class_aware, max_det)
    return [dets[i] for i in keep]


def unletterbox(dets: list[Detection], t: LetterboxTransform) -> list[Detection]:
    """Map model-input boxes back to original pixels, clamped to the image."""
    w, h = t.original
    out = []
    for d in dets:
        b = t.to_original(np.asarray(d.box, float))
        b = np.clip(b, 0, [w, h, w, h])
        if b[2] > b[0] and b[3] > b[1]:
            out.append(Detection(d.class_id, d.confidence, tuple(float(v) for v in b)))
    return out


class Postprocessor:
    """Turns a batch of raw head maps into per-image detection lists."""

    def __init__(self, num_classes: int = 4, reg_max: int = 16, imgsz: int = 640,
                 conf: float = INFER_CONF, iou: float = INFER_IOU, max_det: int = MAX_DET,
                 strides=DETECT_STRIDES):
        self.nc, self.reg_max = num_classes, reg_max
        self.anchors: Anchors = make_anchor_points(strides, imgsz)
        self.conf, self.iou, self.max_det = conf, iou, max_det

    def __call__(self, heads) -> list[list[Detection]]:
        arrays = [np.asarray(getattr(h, "data", h), np.float64) for h in heads]
        dist, cls = split_head(arrays, self.reg_max)
        _, ltrb = dist_expectation(dist)
        boxes = distances_to_box(self.anchors.centers, self.anchors.strides, ltrb)
        results = []
        for i in range(len(boxes)):
            scores = expit(cls[i])
            c = scores.argmax(axis=1)
            conf = scores[np.arange(len(c)), c]
            b = boxes[i]
            ok = (conf >= self.conf) & (b[:, 2] > b[:, 0]) & (b[:, 3] > b[:, 1])
            idx = np.flatnonzero(ok)
            keep = idx[nms_indices(b[idx], conf[idx], c[idx], self.iou, True, self.max_det)]
            results.append([Detection(int(c[j]), float(conf[j]), tuple(float(v) for v in b[j]))
                            for j in keep])
        return results


def write_detections_jsonl(path, records) -> None:
    """``records`` is an iterable of ``(image_id, [Detection])``."""
    with open(path, "w") as f:
        for image_id, dets in records:
            f.write(json.dumps({"image_id": image_id, "detections": [d.to_dict() for d in dets]}) + "\n")


def read_detections_jsonl(path) -> list[tuple[object, list[Detection]]]:
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                dets = [Detection(int(d["class"]), float(d["conf"]), tuple(float(v) for v in d["box"]))
                        for d in rec["detections"]]
            except (KeyError, TypeError, ValueError) as e:
                raise ValueError(f"{path}:{lineno}: bad detection record ({e})") from None
            out.append((rec["image_id"], dets))
    return out
