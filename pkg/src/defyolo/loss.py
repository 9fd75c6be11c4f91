"""Target assignment and the detector training objective.

The objective combines box (CIoU), class (BCE) and distribution focal
terms, ``7.5*box + 0.5*cls + 1.5*dfl``, plus ``0.5 * focal`` where the
focal term is applied to a per-anchor objectness proxy (the maximum class
probability). Assigned targets are constants with respect to the network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from .model.config import DETECT_STRIDES
from .tensor import ShapeError, Tensor

BOX_GAIN, CLS_GAIN, DFL_GAIN, FOCAL_GAIN = 7.5, 0.5, 1.5, 0.5
TOPK, ALIGN_ALPHA, ALIGN_BETA = 10, 0.5, 6.0
PROB_CLAMP = 1e-7
_EPS = 1e-9


@dataclass(frozen=True)
class GroundTruthBox:
    class_id: int
    box: tuple[float, float, float, float]

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x2 > x1 and y2 > y1):
            raise ValueError(f"degenerate box {self.box}")
        if self.class_id < 0:
            raise ValueError(f"invalid class id {self.class_id}")


@dataclass(frozen=True)
class FocalConfig:
    alpha: float = 0.25
    gamma: float = 1.5

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("focal alpha must lie in (0, 1)")
        if self.gamma < 0:
            raise ValueError("focal gamma must be nonnegative")


@dataclass
class LossBreakdown:
    box: float
    cls: float
    dfl: float
    focal: float = 0.0
    total: float = field(init=False)

    def __post_init__(self):
        self.total = combine(self.box, self.cls, self.dfl, self.focal)

    def as_dict(self) -> dict:
        return {"box": self.box, "cls": self.cls, "dfl": self.dfl, "focal": self.focal,
                "total": self.total}


def combine(box, cls, dfl, focal=0.0):
    """``L_T = (7.5*box + 0.5*cls + 1.5*dfl) + 0.5*focal``."""
    return BOX_GAIN * box + CLS_GAIN * cls + DFL_GAIN * dfl + FOCAL_GAIN * focal


# ---------------------------------------------------------------------------
# anchors


class Anchors(NamedTuple):
    centers: np.ndarray  # (A, 2) x, y in pixels
    strides: np.ndarray  # (A,)


def make_anchor_points(strides=DETECT_STRIDES, imgsz: int = 640) -> Anchors:
    """Cell centres ``((col + 0.5) * s, (row + 0.5) * s)``, scale by scale, row-major."""
    centers, strd = [], []
    for s in strides:
        if imgsz % s:
            raise ValueError(f"input size {imgsz} not divisible by stride {s}")
        n = imgsz // s
        ys, xs = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        centers.append(np.stack([(xs.ravel() + 0.5) * s, (ys.ravel() + 0.5) * s], axis=1))
        strd.append(np.full(n * n, float(s)))
    return Anchors(np.concatenate(centers), np.concatenate(strd))


# ---------------------------------------------------------------------------
# box geometry


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(M, 4)`` and ``(A, 4)`` xyxy boxes."""
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def ciou_with_grad(p: np.ndarray, g: np.ndarray, eps: float = 1e-7):
    """Complete-IoU loss ``1 - (IoU - rho^2/c^2 - alpha*v)`` and its gradient w.r.t. ``p``.

    ``p`` and ``g`` are ``(P, 4)`` xyxy arrays. ``alpha`` is differentiated
    through, so the returned gradient is the exact derivative of the loss.
    """
    px1, py1, px2, py2 = p.T
    gx1, gy1, gx2, gy2 = g.T
    w1, h1 = px2 - px1, py2 - py1
    w2, h2 = gx2 - gx1, gy2 - gy1
    if np.any(w1 <= 0) or np.any(h1 <= 0) or np.any(w2 <= 0) or np.any(h2 <= 0):
        raise ValueError("ciou: zero-area box")

    # intersection
    ix2_is_p = px2 < gx2
    ix1_is_p = px1 > gx1
    iy2_is_p = py2 < gy2
    iy1_is_p = py1 > gy1
    iw_raw = np.where(ix2_is_p, px2, gx2) - np.where(ix1_is_p, px1, gx1)
    ih_raw = np.where(iy2_is_p, py2, gy2) - np.where(iy1_is_p, py1, gy1)
    iw_pos, ih_pos = iw_raw > 0, ih_raw > 0
    iw, ih = np.where(iw_pos, iw_raw, 0.0), np.where(ih_pos, ih_raw, 0.0)
    inter = iw * ih
    union = w1 * h1 + w2 * h2 - inter
    iou = inter / union

    # enclosing box and centre distance
    cx2_is_p = px2 > gx2
    cx1_is_p = px1 < gx1
    cy2_is_p = py2 > gy2
    cy1_is_p = py1 < gy1
    cw = np.where(cx2_is_p, px2, gx2) - np.where(cx1_is_p, px1, gx1)
    ch = np.where(cy2_is_p, py2, gy2) - np.where(cy1_is_p, py1, gy1)
    c2 = cw ** 2 + ch ** 2 + eps
    dx = gx1 + gx2 - px1 - px2
    dy = gy1 + gy2 - py1 - py2
    rho2 = (dx ** 2 + dy ** 2) / 4

    # aspect term
    k = 4 / math.pi ** 2
    at_diff = np.arctan(w2 / h2) - np.arctan(w1 / h1)
    v = k * at_diff ** 2
    D = v - iou + (1 + eps)
    alpha = v / D
    loss = 1 - (iou - (rho2 / c2 + v * alpha))

    # gradients, columns (x1, y1, x2, y2)
    zeros = np.zeros_like(px1)
    d_iw = np.stack([np.where(ix1_is_p & iw_pos, -1.0, 0.0), zeros,
                     np.where(ix2_is_p & iw_pos, 1.0, 0.0), zeros], axis=1)
    d_ih = np.stack([zeros, np.where(iy1_is_p & ih_pos, -1.0, 0.0),
                     zeros, np.where(iy2_is_p & ih_pos, 1.0, 0.0)], axis=1)
    d_inter = ih[:, None] * d_iw + iw[:, None] * d_ih
    d_area = np.stack([-h1, -w1, h1, w1], axis=1)
    d_iou = d_inter * (1 / union + inter / union ** 2)[:, None] - (inter / union ** 2)[:, None] * d_area

    d_cw = np.stack([np.where(cx1_is_p, -1.0, 0.0), zeros, np.where(cx2_is_p, 1.0, 0.0), zeros], axis=1)
    d_ch = np.stack([zeros, np.where(cy1_is_p, -1.0, 0.0), zeros, np.where(cy2_is_p, 1.0, 0.0)], axis=1)
    d_c2 = 2 * cw[:, None] * d_cw + 2 * ch[:, None] * d_ch
    d_rho2 = np.stack([-dx / 2, -dy / 2, -dx / 2, -dy / 2], axis=1)
    d_pen = d_rho2 / c2[:, None] - (rho2 / c2 ** 2)[:, None] * d_c2

    r2 = w1 ** 2 + h1 ** 2
    d_at1 = np.stack([-h1 / r2, w1 / r2, h1 / r2, -w1 / r2], axis=1)  # d atan(w1/h1)
    d_v = (-2 * k * at_diff)[:, None] * d_at1

    grad = (-1 + v ** 2 / D ** 2)[:, None] * d_iou + d_pen + (2 * v / D - v ** 2 / D ** 2)[:, None] * d_v
    return loss, grad


def ciou_loss(pred_box, gt_box) -> float:
    loss, _ = ciou_with_grad(np.asarray(pred_box, float).reshape(1, 4),
                             np.asarray(gt_box, float).reshape(1, 4))
    return float(loss[0])


# ---------------------------------------------------------------------------
# per-term losses on plain arrays


def dfl_with_grad(logits: np.ndarray, target: np.ndarray):
    """Interpolated cross-entropy over ``R`` bins. ``logits (P, R)``, ``target (P,)``.

    Targets outside ``[0, R-1-0.01]`` are clamped; the number clamped is returned.
    """
    r = logits.shape[-1]
    t = np.asarray(target, dtype=logits.dtype)
    clipped = int(np.sum((t < 0) | (t > r - 1.01)))
    t = np.clip(t, 0, r - 1.01)
    tl = np.floor(t).astype(np.int64)
    wl = tl + 1 - t
    wr = 1 - wl
    lse = logsumexp(logits, axis=-1)
    rows = np.arange(len(t))
    loss = (lse - logits[rows, tl]) * wl + (lse - logits[rows, tl + 1]) * wr
    p = np.exp(logits - lse[:, None])
    grad = p.copy()
    grad[rows, tl] -= wl
    grad[rows, tl + 1] -= wr
    return loss, grad, clipped


def dfl_loss(dist_logits, target: float) -> float:
    loss, _, _ = dfl_with_grad(np.asarray(dist_logits, float).reshape(1, -1), np.array([target]))
    return float(loss[0])


def bce_with_logits(z: np.ndarray, t: np.ndarray):
    """Elementwise logit BCE and its derivative."""
    loss = np.logaddexp(0, z) - z * t
    return loss, expit(z) - t


def bce_cls_loss(cls_logits, targets, normalizer: float | None = None) -> float:
    """Mean logit BCE, or the sum divided by ``normalizer`` when given."""
    loss, _ = bce_with_logits(np.asarray(cls_logits, float), np.asarray(targets, float))
    return float(loss.mean() if normalizer is None else loss.sum() / normalizer)


def focal_with_grad(z: np.ndarray, positive: np.ndarray, cfg: FocalConfig = FocalConfig(),
                    alpha_t: float | None = None):
    """``-alpha_t (1 - p_t)^gamma log p_t`` on logits ``z``; returns loss and d/dz.

    ``alpha_t`` overrides the class-balance factor for both signs when given.
    """
    a, gmm = cfg.alpha, cfg.gamma
    pos = np.asarray(positive, bool)
    log_p, log_q = log_expit(z), log_expit(-z)
    p = np.clip(expit(z), PROB_CLAMP, 1 - PROB_CLAMP)
    q = 1 - p
    if alpha_t is None:
        at = np.where(pos, a, 1 - a)
    else:
        at = np.full(z.shape, float(alpha_t))
    log_pt = np.where(pos, log_p, log_q)
    pt = np.where(pos, p, q)
    one_m = 1 - pt
    mod = one_m ** gmm
    loss = -at * mod * log_pt
    # d/dz of p_t is +p*q for positives and -p*q for negatives
    dpt = np.where(pos, 1.0, -1.0) * p * q
    if gmm:
        dmod = -gmm * one_m ** (gmm - 1)
    else:
        dmod = np.zeros_like(one_m)
    dloss_dpt = -at * (dmod * log_pt + mod / pt)
    return loss, dloss_dpt * dpt


def focal_loss(p: float, positive: bool, cfg: FocalConfig = FocalConfig()) -> float:
    p = min(max(float(p), PROB_CLAMP), 1 - PROB_CLAMP)
    pt = p if positive else 1 - p
    at = cfg.alpha if positive else 1 - cfg.alpha
    return float(-at * (1 - pt) ** cfg.gamma * math.log(pt))


# ---------------------------------------------------------------------------
# decoding and assignment


def split_head(heads: list[np.ndarray], reg_max: int):
    """Flatten head maps into ``(N, A, 4, R)`` distance logits and ``(N, A, nc)`` class logits."""
    flat = np.concatenate([h.reshape(h.shape[0], h.shape[1], -1) for h in heads], axis=2)
    flat = flat.transpose(0, 2, 1)
    n, a, c = flat.shape
    dist = flat[..., :4 * reg_max].reshape(n, a, 4, reg_max)
    return dist, flat[..., 4 * reg_max:]


def dist_expectation(dist: np.ndarray):
    """Softmax over bins and the expected bin index. Returns ``(probs, expectation)``."""
    z = dist - dist.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    bins = np.arange(dist.shape[-1], dtype=dist.dtype)
    return p, p @ bins


def ltrb_to_boxes(ltrb: np.ndarray, anchors: Anchors) -> np.ndarray:
    c, s = anchors.centers, anchors.strides[:, None]
    return np.concatenate([c - ltrb[..., :2] * s, c + ltrb[..., 2:] * s], axis=-1)


def boxes_to_ltrb(boxes: np.ndarray, anchors: Anchors) -> np.ndarray:
    c, s = anchors.centers, anchors.strides[:, None]
    return np.concatenate([c - boxes[..., :2], boxes[..., 2:] - c], axis=-1) / s


@dataclass
class Assignment:
    """Per-anchor targets for one image."""
    fg: np.ndarray  # (A,) bool
    gt_index: np.ndarray  # (A,) int, -1 for negatives
    labels: np.ndarray  # (A,) int
    boxes: np.ndarray  # (A, 4)
    weights: np.ndarray  # (A,) normalised alignment weight
    metric: np.ndarray  # (A,) alignment metric of the chosen GT


def assign(scores: np.ndarray, pred_boxes: np.ndarray, anchors: Anchors, gt_boxes: np.ndarray,
           gt_labels: np.ndarray, topk: int = TOPK, alpha: float = ALIGN_ALPHA,
           beta: float = ALIGN_BETA) -> Assignment:
    """Task-aligned top-k assignment for one image.

    ``scores`` are class probabilities ``(A, nc)``, ``pred_boxes`` pixel xyxy
    ``(A, 4)``. Candidates are anchors whose centre lies strictly inside a GT
    box; each GT keeps its ``topk`` candidates by ``score^alpha * IoU^beta``
    (ties to the lower anchor index). An anchor claimed by several GTs goes
    to the one with the larger metric (ties to the lower GT index).
    """
    a = len(anchors.centers)
    m = len(gt_boxes)
    fg = np.zeros(a, bool)
    gt_index = np.full(a, -1)
    labels = np.zeros(a, np.int64)
    boxes = np.zeros((a, 4))
    weights = np.zeros(a)
    metric_out = np.zeros(a)
    if m == 0:
        return Assignment(fg, gt_index, labels, boxes, weights, metric_out)
    gt_boxes = np.asarray(gt_boxes, float).reshape(m, 4)
    gt_labels = np.asarray(gt_labels, int).reshape(m)
    cx, cy = anchors.centers[:, 0], anchors.centers[:, 1]
    inside = ((cx[None] > gt_boxes[:, 0:1]) & (cx[None] < gt_boxes[:, 2:3])
              & (cy[None] > gt_boxes[:, 1:2]) & (cy[None] < gt_boxes[:, 3:4]))
    iou = box_iou_matrix(gt_boxes, pred_boxes)
    metric = scores[:, gt_labels].T ** alpha * iou ** beta
    pos = np.zeros((m, a), bool)
    for j in range(m):
        cand = np.flatnonzero(inside[j])
        if cand.size == 0:
            continue
        order = np.argsort(-metric[j, cand], kind="stable")
        pos[j, cand[order[:topk]]] = True
    masked = np.where(pos, metric, -1.0)
    claimed = pos.any(axis=0)
    owner = np.argmax(masked, axis=0)
    pos_final = np.zeros_like(pos)
    pos_final[owner[claimed], np.flatnonzero(claimed)] = True

    metric_pos = np.where(pos_final, metric, 0.0)
    iou_pos = np.where(pos_final, iou, 0.0)
    max_metric = metric_pos.max(axis=1, keepdims=True)
    max_iou = iou_pos.max(axis=1, keepdims=True)
    norm = (metric_pos * max_iou / (max_metric + _EPS)).max(axis=0)

    fg[:] = claimed
    gt_index[claimed] = owner[claimed]
    labels[claimed] = gt_labels[owner[claimed]]
    boxes[claimed] = gt_boxes[owner[claimed]]
    weights[claimed] = norm[claimed]
    metric_out[claimed] = metric[owner[claimed], np.flatnonzero(claimed)]
    return Assignment(fg, gt_index, labels, boxes, weights, metric_out)


# ---------------------------------------------------------------------------
# full objective


class DetectionLoss:
    """Computes ``LossBreakdown`` and gradients w.r.t. the three raw head maps."""

    def __init__(self, num_classes: int = 4, reg_max: int = 16, imgsz: int = 640,
                 strides=DETECT_STRIDES, focal: bool = True, focal_cfg: FocalConfig = FocalConfig()):
        self.nc, self.reg_max, self.imgsz = num_classes, reg_max, imgsz
        self.anchors = make_anchor_points(strides, imgsz)
        self.focal = focal
        self.focal_cfg = focal_cfg
        self.clamped = 0

    def decode(self, heads: list[np.ndarray]):
        dist, cls = split_head(heads, self.reg_max)
        probs, ltrb = dist_expectation(dist)
        return dist, cls, probs, ltrb, ltrb_to_boxes(ltrb, self.anchors)

    def assign(self, heads: list[np.ndarray], targets) -> list[Assignment]:
        """``targets`` is a list (per image) of ``(boxes (M,4), labels (M,))``."""
        _, cls, _, _, boxes = self.decode(heads)
        scores = expit(cls)
        return [assign(scores[i], boxes[i], self.anchors, *targets[i]) for i in range(len(targets))]

    def compute(self, heads: list[np.ndarray], targets, assignments=None):
        """Returns ``(LossBreakdown, [grad per head], assignments)``; the gradients are of ``total``."""
        n = heads[0].shape[0]
        if len(targets) != n:
            raise ShapeError(f"{len(targets)} target sets for batch of {n}")
        dist, cls, probs, ltrb, boxes = self.decode(heads)
        if assignments is None:
            scores = expit(cls)
            assignments = [assign(scores[i], boxes[i], self.anchors, *targets[i]) for i in range(n)]
        fg = np.stack([a.fg for a in assignments])
        w = np.stack([a.weights for a in assignments])
        labels = np.stack([a.labels for a in assignments])
        tboxes = np.stack([a.boxes for a in assignments])
        norm = max(float(w.sum()), 1.0)

        tscores = np.zeros(cls.shape)
        ni, ai = np.nonzero(fg)
        tscores[ni, ai, labels[ni, ai]] = w[ni, ai]
        bce, d_cls = bce_with_logits(cls, tscores)
        cls_loss = bce.sum() / norm
        d_cls = d_cls * (CLS_GAIN / norm)

        d_dist = np.zeros(dist.shape)
        box_loss = dfl_l = 0.0
        if ni.size:
            wf = w[ni, ai]
            pb, tb = boxes[ni, ai], tboxes[ni, ai]
            ciou, d_pb = ciou_with_grad(pb, tb)
            box_loss = float((ciou * wf).sum() / norm)
            s = self.anchors.strides[ai][:, None]
            d_ltrb = np.concatenate([-d_pb[:, :2], d_pb[:, 2:]], axis=1) * s
            d_ltrb *= (BOX_GAIN / norm) * wf[:, None]
            p = probs[ni, ai]  # (P, 4, R)
            e = ltrb[ni, ai]
            bins = np.arange(self.reg_max)
            d_dist[ni, ai] += d_ltrb[:, :, None] * p * (bins[None, None] - e[:, :, None])

            tl = boxes_to_ltrb(tb, _subset(self.anchors, ai))
            dl, dg, clipped = dfl_with_grad(dist[ni, ai].reshape(-1, self.reg_max), tl.reshape(-1))
            self.clamped += clipped
            dl = dl.reshape(-1, 4).mean(axis=1)
            dfl_l = float((dl * wf).sum() / norm)
            d_dist[ni, ai] += dg.reshape(-1, 4, self.reg_max) * ((DFL_GAIN / norm) * wf / 4)[:, None, None]

        focal_l = 0.0
        if self.focal:
            top = cls.argmax(axis=-1)
            z = np.take_along_axis(cls, top[..., None], axis=-1)[..., 0]
            fl, dz = focal_with_grad(z, fg, self.focal_cfg)
            focal_l = float(fl.sum() / norm)
            np.put_along_axis(d_cls, top[..., None],
                              np.take_along_axis(d_cls, top[..., None], axis=-1)
                              + (FOCAL_GAIN / norm) * dz[..., None], axis=-1)

        breakdown = LossBreakdown(box_loss, float(cls_loss), dfl_l, focal_l)
        flat_grad = np.concatenate([d_dist.reshape(n, -1, 4 * self.reg_max), d_cls], axis=-1)
        return breakdown, self._unflatten(flat_grad, heads), assignments

    @staticmethod
    def _unflatten(flat: np.ndarray, heads):
        out, start = [], 0
        flat = flat.transpose(0, 2, 1)
        for h in heads:
            n, c, hh, ww = h.shape
            out.append(np.ascontiguousarray(flat[:, :, start:start + hh * ww]).reshape(h.shape).astype(h.dtype))
            start += hh * ww
        return out


def _subset(anchors: Anchors, idx) -> Anchors:
    return Anchors(anchors.centers[idx], anchors.strides[idx])


def total_loss(heads: list[Tensor], targets, loss_fn: DetectionLoss, assignments=None,
               scale: float = 1.0):
    """Differentiable total objective as a scalar tensor plus its ``LossBreakdown``.

    ``scale`` multiplies the returned tensor (and its gradient) only; the
    breakdown always reports the unscaled objective.
    """
    arrays = [h.data.astype(np.float64) for h in heads]
    breakdown, grads, assignments = loss_fn.compute(arrays, targets, assignments)
    dt = heads[0].dtype
    out = Tensor.from_op(np.full((1, 1, 1, 1), breakdown.total * scale, dtype=dt), heads, "detection_loss")
    if out.requires_grad:

        def _back(g):
            gs = float(g.reshape(())) * scale
            for h, gr in zip(heads, grads):
                if h.requires_grad:
                    h.accumulate((gr * gs).astype(dt, copy=False))

        out.backward_fn = _back
    return out, breakdown, assignments
