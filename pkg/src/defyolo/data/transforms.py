"""Image IO, letterboxing and flip augmentation for single-channel thermal frames."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from ..postprocess import LetterboxTransform

PAD_VALUE = 114


def read_gray(path) -> np.ndarray:
    """8-bit grayscale image as an (H, W) uint8 array; colour inputs are converted."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def write_gray(path, image: np.ndarray) -> None:
    """PNG by default; a ``.pgm`` suffix writes a binary PGM instead."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8 or arr.ndim != 2:
        raise ValueError(f"expected (H, W) uint8, got {arr.shape} {arr.dtype}")
    Image.fromarray(arr).save(path)


def letterbox(image: np.ndarray, target: int = 640, pad_value: int = PAD_VALUE):
    """Aspect-preserving resize into a ``target`` square with symmetric padding.

    Works on (H, W) or (H, W, C) uint8 arrays. Returns the padded image and
    the :class:`LetterboxTransform` mapping original pixels to padded ones.
    """
    img = np.asarray(image)
    if img.size == 0:
        raise ValueError("letterbox: empty image")
    h, w = img.shape[:2]
    scale = min(target / w, target / h)
    nw, nh = min(target, round(w * scale)), min(target, round(h * scale))
    if (nw, nh) != (w, h):
        img = np.asarray(Image.fromarray(img).resize((nw, nh), Image.BILINEAR))
    left, top = (target - nw) // 2, (target - nh) // 2
    out = np.full((target, target) + img.shape[2:], pad_value, dtype=img.dtype)
    out[top:top + nh, left:left + nw] = img
    return out, LetterboxTransform(scale, (float(left), float(top)), (w, h))


def letterbox_boxes(boxes, t: LetterboxTransform) -> np.ndarray:
    return t.to_model(np.asarray(boxes, float).reshape(-1, 4))


def hflip(image: np.ndarray, boxes):
    """Mirror horizontally; boxes map x -> W - x with corners swapped."""
    img = np.asarray(image)
    w = img.shape[1]
    b = np.asarray(boxes, float).reshape(-1, 4)
    flipped = np.stack([w - b[:, 2], b[:, 1], w - b[:, 0], b[:, 3]], axis=1)
    return img[:, ::-1].copy(), flipped


def intensity_jitter(image: np.ndarray, rng: np.random.Generator, gain: float = 0.15,
                     bias: float = 10.0) -> np.ndarray:
    """Random global gain/offset on a uint8 frame, clipped back to [0, 255]."""
    g = 1.0 + rng.uniform(-gain, gain)
    b = rng.uniform(-bias, bias)
    return np.clip(np.asarray(image, np.float32) * g + b, 0, 255).astype(np.uint8)


def to_model_input(images, dtype=np.float32) -> np.ndarray:
    """Stack letterboxed (H, W) uint8 frames into (N, 3, H, W) in [0, 1]."""
    arr = np.stack([np.asarray(im) for im in images]).astype(dtype) / 255.0
    return np.repeat(arr[:, None], 3, axis=1)
