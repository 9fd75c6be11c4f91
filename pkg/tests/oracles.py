"""Slow, loop-based references used to cross-check the vectorised code."""

import numpy as np


def iou_xyxy(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def nms_reference(boxes, scores, classes, thr, class_aware=True, max_det=300):
    """Visit boxes by (score desc, index asc); keep one unless a kept box overlaps it."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if len(kept) == max_det:
            break
        if all(not ((not class_aware or classes[j] == classes[i])
                    and iou_xyxy(boxes[i], boxes[j]) > thr) for j in kept):
            kept.append(i)
    return kept


def random_nms_instance(rng, n=None):
    n = int(rng.integers(1, 40)) if n is None else n
    xy = rng.uniform(0, 60, size=(n, 2))
    wh = rng.uniform(4, 30, size=(n, 2))
    boxes = np.concatenate([xy, xy + wh], axis=1)
    # coarse scores force ties
    scores = rng.integers(1, 8, size=n) / 8.0
    classes = rng.integers(0, 3, size=n)
    return boxes, scores, classes


def ap_reference(dets, gts, cls, thr):
    """AP by the textbook recipe: greedy match, then 101-point max-precision sampling."""
    images = list(dict.fromkeys([g[0] for g in gts] + [d[0] for d in dets]))
    rank = {im: i for i, im in enumerate(images)}
    mine = [(k, d) for k, d in enumerate(dets) if d[1] == cls]
    mine.sort(key=lambda kd: (-kd[1][2], rank[kd[1][0]], kd[0]))
    gt_list = [g for g in gts if g[1] == cls]
    if not gt_list:
        return None
    used = [False] * len(gt_list)
    tp = []
    for _, (im, _, _, box) in mine:
        best, best_j = -1.0, -1
        for j, (gim, _, gbox) in enumerate(gt_list):
            if gim != im or used[j]:
                continue
            v = iou_xyxy(box, gbox)
            if v >= thr and v > best:
                best, best_j = v, j
        if best_j >= 0:
            used[best_j] = True
        tp.append(best_j >= 0)
    prec, rec = [], []
    hit = 0
    for i, t in enumerate(tp, 1):
        hit += t
        prec.append(hit / i)
        rec.append(hit / len(gt_list))
    total = 0.0
    for r in np.linspace(0, 1, 101):
        cands = [p for p, q in zip(prec, rec) if q >= r]
        total += max(cands) if cands else 0.0
    return total / 101


def random_eval_instance(rng, n_images=6, num_classes=4, max_per_image=None):
    gts, dets = [], []
    for im in range(n_images):
        start = len(dets)
        for _ in range(int(rng.integers(0, 5))):
            xy = rng.uniform(0, 80, size=2)
            wh = rng.uniform(5, 30, size=2)
            box = tuple(np.concatenate([xy, xy + wh]))
            c = int(rng.integers(0, num_classes))
            gts.append((f"img{im}", c, box))
            for _ in range(int(rng.integers(0, 3))):
                jit = rng.normal(scale=4, size=4)
                b = np.array(box) + jit
                b[2:] = np.maximum(b[2:], b[:2] + 1)
                cc = c if rng.random() < 0.8 else int(rng.integers(0, num_classes))
                dets.append((f"img{im}", cc, float(rng.integers(1, 20) / 20), tuple(b)))
        for _ in range(int(rng.integers(0, 3))):
            xy = rng.uniform(0, 80, size=2)
            b = tuple(np.concatenate([xy, xy + rng.uniform(5, 30, size=2)]))
            dets.append((f"img{im}", int(rng.integers(0, num_classes)), float(rng.uniform()), b))
        if max_per_image is not None:
            del dets[start + max_per_image:]
    if not gts:
        gts.append(("img0", 0, (1.0, 1.0, 20.0, 20.0)))
    return dets, gts
