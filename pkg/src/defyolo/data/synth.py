"""Deterministic synthetic thermal scenes with concealed-weapon annotations.

A scene is a cool background gradient with one or two warm body ellipses.
Weapons are cold, class-specific shapes drawn onto a body:

* cleaver: broad rectangle
* gun: L-shaped polygon (barrel plus grip)
* knife: thin elongated bar
* scissors: two crossing thin bars

Each weapon is darkened until the mean inside its tight box sits at least
``delta`` below the mean of the surrounding body ring. Boxes are the exact
pixel bounds of the drawn mask. Everything is a pure function of the seed.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..model.config import CLASS_NAMES
from .formats import AnnotationSet, BoxAnnotation, ImageInfo, write_yolo
from .transforms import write_gray

log = logging.getLogger(__name__)

# training-split instance counts per class of the reference thermal dataset
REFERENCE_INSTANCES = (1274, 2184, 3730, 753)
SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)
RING = 6  # width of the body ring used as the "surrounding" reference
_MAX_CONTRAST_PASSES = 40


@dataclass(frozen=True)
class SynthSceneConfig:
    seed: int = 0
    width: int = 640
    height: int = 480
    subjects: tuple[int, int] = (1, 2)
    weapons_per_subject: tuple[int, int] = (1, 4)
    delta: float = 25.0
    noise_sigma: float = 4.0
    class_mix: tuple[float, ...] = tuple(c / sum(REFERENCE_INSTANCES) for c in REFERENCE_INSTANCES)
    max_retries: int = 60

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("SynthSceneConfig.delta must be > 0")
        if self.noise_sigma < 0:
            raise ValueError("SynthSceneConfig.noise_sigma must be >= 0")
        for name in ("subjects", "weapons_per_subject"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"SynthSceneConfig.{name} must satisfy 1 <= lo <= hi, got {(lo, hi)}")
        if len(self.class_mix) != len(CLASS_NAMES) or min(self.class_mix) < 0 or sum(self.class_mix) <= 0:
            raise ValueError("SynthSceneConfig.class_mix needs one nonnegative weight per class")
        if self.width < 128 or self.height < 128:
            raise ValueError("SynthSceneConfig: image must be at least 128x128")


@dataclass
class SynthScene:
    image: np.ndarray  # (H, W) uint8
    labels: list[int]
    boxes: list[tuple[float, float, float, float]]
    body_mask: np.ndarray = field(repr=False)
    instance_mask: np.ndarray = field(repr=False)  # 0 background, k+1 for weapon k
    skipped: int = 0


# ---------------------------------------------------------------------------
# shapes


def _cleaver(rng):
    w, h = rng.integers(52, 69), rng.integers(34, 45)
    m = np.ones((h, w), bool)
    return m.T.copy() if rng.random() < 0.25 else m


def _gun(rng):
    bl, bt = rng.integers(48, 61), rng.integers(13, 17)
    gw, gh = rng.integers(13, 18), rng.integers(20, 29)
    m = np.zeros((bt + gh, bl), bool)
    m[:bt] = True
    if rng.random() < 0.5:
        m[bt:, :gw] = True
    else:
        m[bt:, bl - gw:] = True
    return m


def _knife(rng):
    length, t = rng.integers(72, 97), rng.integers(17, 23)
    m = np.ones((t, length), bool)
    return m.T.copy() if rng.random() < 0.5 else m


def _scissors(rng):
    s, t = rng.integers(40, 51), rng.uniform(7.0, 9.0)
    i, j = np.mgrid[0:s, 0:s]
    d1 = np.abs(i - j) / np.sqrt(2)
    d2 = np.abs(i + j - (s - 1)) / np.sqrt(2)
    return np.minimum(d1, d2) <= t / 2


SHAPES = (_cleaver, _gun, _knife, _scissors)


# ---------------------------------------------------------------------------
# allocation helpers


def quota(total: int, weights) -> np.ndarray:
    """Largest-remainder apportionment of ``total`` items across ``weights``."""
    w = np.asarray(weights, float)
    exact = total * w / w.sum()
    base = np.floor(exact).astype(int)
    rem = total - base.sum()
    order = np.argsort(-(exact - base), kind="stable")
    base[order[:rem]] += 1
    return base


def split_counts(total: int) -> tuple[int, int, int]:
    return tuple(int(v) for v in quota(total, SPLIT_FRACTIONS))


def allocate_classes(n: int, mix, rng: np.random.Generator) -> np.ndarray:
    labels = np.repeat(np.arange(len(mix)), quota(n, mix))
    return rng.permutation(labels)


# ---------------------------------------------------------------------------
# rendering


def _bodies(cfg: SynthSceneConfig, k: int, rng):
    out = []
    slot = cfg.width / k
    for j in range(k):
        cx = slot * (j + 0.5) + rng.uniform(-0.08, 0.08) * slot
        ax = rng.uniform(0.30, 0.36) * min(slot, 0.7 * cfg.width)
        ay = rng.uniform(0.40, 0.46) * cfg.height
        cy = cfg.height / 2 + rng.uniform(-0.03, 0.03) * cfg.height
        base = rng.uniform(175, 210)
        out.append((cx, cy, ax, ay, base, rng.uniform(-12, 12)))
    return out


def _inside_ellipse(x, y, body, shrink=0.95) -> bool:
    cx, cy, ax, ay = body[:4]
    return ((x - cx) / (ax * shrink)) ** 2 + ((y - cy) / (ay * shrink)) ** 2 <= 1.0


def _place(mask_shape, body, taken, cfg, rng):
    h, w = mask_shape
    cx, cy, ax, ay = body[:4]
    for _ in range(cfg.max_retries):
        x0 = int(rng.integers(int(cx - ax), int(cx + ax - w) + 1)) if 2 * ax > w else -1
        y0 = int(rng.integers(int(cy - ay), int(cy + ay - h) + 1)) if 2 * ay > h else -1
        if x0 < 0 or y0 < 0:
            continue
        X0, Y0, X1, Y1 = x0 - RING, y0 - RING, x0 + w + RING, y0 + h + RING
        if X0 < 0 or Y0 < 0 or X1 > cfg.width or Y1 > cfg.height:
            continue
        if not all(_inside_ellipse(px, py, body) for px, py in ((X0, Y0), (X1, Y0), (X0, Y1), (X1, Y1))):
            continue
        if any(X0 < b[2] and b[0] < X1 and Y0 < b[3] and b[1] < Y1 for b in taken):
            continue
        return x0, y0
    return None


def _ring_index(box, shape):
    x0, y0, x1, y1 = (int(v) for v in box)
    H, W = shape
    X0, Y0, X1, Y1 = max(0, x0 - RING), max(0, y0 - RING), min(W, x1 + RING), min(H, y1 + RING)
    ring = np.zeros(shape, bool)
    ring[Y0:Y1, X0:X1] = True
    ring[y0:y1, x0:x1] = False
    return ring


def contrast_stats(image, box, body_mask, instance_mask):
    """(interior mean, surrounding body mean) for one box."""
    x0, y0, x1, y1 = (int(v) for v in box)
    img = np.asarray(image, float)
    ring = _ring_index(box, img.shape) & body_mask & (instance_mask == 0)
    if not ring.any():
        return float(img[y0:y1, x0:x1].mean()), float("nan")
    return float(img[y0:y1, x0:x1].mean()), float(img[ring].mean())


def render_scene(cfg: SynthSceneConfig, labels_per_subject: list[list[int]],
                 rng: np.random.Generator) -> SynthScene:
    H, W = cfg.height, cfg.width
    yy, xx = np.mgrid[0:H, 0:W].astype(float)
    bg0, gy, gx = rng.uniform(40, 80), rng.uniform(-20, 20), rng.uniform(-10, 10)
    clean = bg0 + gy * (yy / H - 0.5) + gx * (xx / W - 0.5)
    body_mask = np.zeros((H, W), bool)
    bodies = _bodies(cfg, len(labels_per_subject), rng)
    for cx, cy, ax, ay, base, grad in bodies:
        r2 = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2
        inside = r2 <= 1.0
        warm = base + grad * (yy - cy) / ay - 22.0 * r2
        clean = np.where(inside, warm, clean)
        body_mask |= inside
    instance = np.zeros((H, W), np.int16)
    placed = []  # (label, box, mask, x0, y0)
    taken = []
    skipped = 0
    for body, labels in zip(bodies, labels_per_subject):
        for c in labels:
            m = SHAPES[c](rng)
            pos = _place(m.shape, body, taken, cfg, rng)
            if pos is None:
                skipped += 1
                log.info("synth: no room for a %s after %d tries, skipped", CLASS_NAMES[c], cfg.max_retries)
                continue
            x0, y0 = pos
            h, w = m.shape
            taken.append((x0 - RING, y0 - RING, x0 + w + RING, y0 + h + RING))
            placed.append((c, (x0, y0, x0 + w, y0 + h), m))
            instance[y0:y0 + h, x0:x0 + w][m] = len(placed)

    # per-weapon cooling depth: start from the level that meets delta on the clean frame
    depths = []
    for k, (c, box, m) in enumerate(placed):
        x0, y0, x1, y1 = box
        ring = _ring_index(box, (H, W)) & body_mask & (instance == 0)
        inner = clean[y0:y1, x0:x1]
        f = m.mean()
        need = (inner.mean() - clean[ring].mean() + cfg.delta) / f
        depths.append(max(need, 0.0) + 3.0 + rng.uniform(0.0, 25.0))
    noise = rng.normal(0.0, cfg.noise_sigma, (H, W)) if cfg.noise_sigma > 0 else np.zeros((H, W))

    for _ in range(_MAX_CONTRAST_PASSES):
        frame = clean.copy()
        for (c, box, m), d in zip(placed, depths):
            x0, y0, x1, y1 = box
            frame[y0:y1, x0:x1][m] -= d
        image = np.clip(np.rint(frame + noise), 0, 255).astype(np.uint8)
        short = False
        for k, (c, box, m) in enumerate(placed):
            inside, around = contrast_stats(image, box, body_mask, instance)
            if not inside <= around - cfg.delta:
                depths[k] += 2.0
                short = True
        if not short:
            break
    else:
        raise RuntimeError("synth: contrast target not reached; lower delta or noise")

    return SynthScene(image, [p[0] for p in placed], [tuple(float(v) for v in p[1]) for p in placed],
                      body_mask, instance, skipped)


# ---------------------------------------------------------------------------
# dataset


@dataclass
class SynthDataset:
    config: SynthSceneConfig
    scenes: dict[str, list[SynthScene]]

    def annotations(self, split: str) -> AnnotationSet:
        aset = AnnotationSet()
        for i, sc in enumerate(self.scenes[split]):
            aset.images.append(ImageInfo(i, f"{i:06d}.png", self.config.width, self.config.height))
            for c, b in zip(sc.labels, sc.boxes):
                aset.boxes.append(BoxAnnotation(i, c, b))
        return aset

    def class_counts(self, split: str | None = None) -> np.ndarray:
        counts = np.zeros(len(CLASS_NAMES), int)
        for s in ([split] if split else self.scenes):
            for sc in self.scenes[s]:
                for c in sc.labels:
                    counts[c] += 1
        return counts


def synth_dataset(cfg: SynthSceneConfig, counts) -> SynthDataset:
    """Generate ``counts`` scenes: an int total (split 80/10/10) or a (train, val, test) triple."""
    if isinstance(counts, (int, np.integer)):
        counts = split_counts(int(counts))
    counts = tuple(int(c) for c in counts)
    if len(counts) != 3 or min(counts) < 0 or sum(counts) <= 0:
        raise ValueError(f"synth_dataset: counts must be positive, got {counts}")
    root = np.random.SeedSequence(cfg.seed)
    split_seeds = root.spawn(len(SPLITS))
    scenes: dict[str, list[SynthScene]] = {}
    for split, n, ss in zip(SPLITS, counts, split_seeds):
        layout_ss, *image_ss = ss.spawn(n + 1)
        lrng = np.random.default_rng(layout_ss)
        layout = []
        for _ in range(n):
            k = int(lrng.integers(cfg.subjects[0], cfg.subjects[1] + 1))
            layout.append([int(lrng.integers(cfg.weapons_per_subject[0], cfg.weapons_per_subject[1] + 1))
                           for _ in range(k)])
        labels = iter(allocate_classes(sum(map(sum, layout)), cfg.class_mix, lrng).tolist())
        scenes[split] = [
            render_scene(cfg, [[next(labels) for _ in range(m)] for m in subj], np.random.default_rng(iss))
            for subj, iss in zip(layout, image_ss)]
    return SynthDataset(cfg, scenes)


def write_dataset(ds: SynthDataset, root) -> Path:
    """``root/<split>/images/*.png`` + ``root/<split>/labels/*.txt`` + ``root/<split>.txt`` lists."""
    root = Path(root)
    for split, scenes in ds.scenes.items():
        img_dir = root / split / "images"
        img_dir.mkdir(parents=True, exist_ok=True)
        aset = ds.annotations(split)
        for im, sc in zip(aset.images, scenes):
            write_gray(img_dir / im.file, sc.image)
        write_yolo(aset, root / split / "labels")
        (root / f"{split}.txt").write_text("".join(f"{split}/images/{im.file}\n" for im in aset.images))
    meta = {
        "generator": asdict(ds.config),
        "class_names": list(CLASS_NAMES),
        "splits": {s: len(v) for s, v in ds.scenes.items()},
        "instances": {s: ds.class_counts(s).tolist() for s in ds.scenes},
        "skipped_weapons": sum(sc.skipped for v in ds.scenes.values() for sc in v),
    }
    (root / "dataset.json").write_text(json.dumps(meta, indent=2))
    return root
