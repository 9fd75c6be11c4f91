"""Annotation sets and their COCO-JSON, Pascal-VOC-XML and YOLO-TXT encodings.

Boxes are held as 0-based pixel-edge ``xyxy`` floats. Class ids follow the
fixed alphabetical table ``cleaver=0, gun=1, knife=2, scissors=3`` in every
format; COCO category ids are written 1-based and re-mapped by name on read.
VOC corners are 1-based inclusive pixel indices, so ``xmin = x1 + 1`` and
``xmax = x2``.
"""

from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

from ..model.config import CLASS_NAMES

IMAGE_SUFFIXES = (".png", ".pgm", ".jpg", ".jpeg", ".bmp")


class AnnotationError(ValueError):
    pass


@dataclass
class ImageInfo:
    id: int
    file: str
    width: int
    height: int


@dataclass
class BoxAnnotation:
    image_id: int
    class_id: int
    box: tuple[float, float, float, float]


@dataclass
class AnnotationSet:
    images: list[ImageInfo] = field(default_factory=list)
    boxes: list[BoxAnnotation] = field(default_factory=list)
    class_names: tuple[str, ...] = CLASS_NAMES

    def validate(self, tol: float = 1e-6) -> None:
        ids = [im.id for im in self.images]
        if len(set(ids)) != len(ids):
            raise AnnotationError("duplicate image ids")
        by_id = {im.id: im for im in self.images}
        for b in self.boxes:
            im = by_id.get(b.image_id)
            if im is None:
                raise AnnotationError(f"box references missing image {b.image_id}")
            if not 0 <= b.class_id < len(self.class_names):
                raise AnnotationError(f"class id {b.class_id} out of range")
            x1, y1, x2, y2 = b.box
            if not (x2 > x1 and y2 > y1):
                raise AnnotationError(f"degenerate box {b.box} in image {im.file}")
            if x1 < -tol or y1 < -tol or x2 > im.width + tol or y2 > im.height + tol:
                raise AnnotationError(f"box {b.box} outside image {im.file} ({im.width}x{im.height})")

    def boxes_for(self, image_id: int) -> list[BoxAnnotation]:
        return [b for b in self.boxes if b.image_id == image_id]

    def by_image(self) -> dict[int, list[BoxAnnotation]]:
        out: dict[int, list[BoxAnnotation]] = {im.id: [] for im in self.images}
        for b in self.boxes:
            out.setdefault(b.image_id, []).append(b)
        return out


def _class_id(name: str) -> int:
    try:
        return CLASS_NAMES.index(name.strip().lower())
    except ValueError:
        raise AnnotationError(f"unknown category {name!r}") from None


# ---------------------------------------------------------------------------
# YOLO txt


def _read_image_size(path: Path) -> tuple[int, int]:
    from PIL import Image

    with Image.open(path) as im:
        return im.size


def parse_yolo(label_dir, images: list[ImageInfo] | None = None, image_dir=None) -> AnnotationSet:
    """Read ``<stem>.txt`` files (``class cx cy w h`` normalised to [0, 1]).

    Image sizes come from ``images`` when given, otherwise from the image
    files in ``image_dir`` (default: ``../images`` next to ``label_dir``).
    """
    label_dir = Path(label_dir)
    if not label_dir.is_dir():
        raise AnnotationError(f"label directory not found: {label_dir}")
    if images is None:
        image_dir = Path(image_dir) if image_dir else label_dir.parent / "images"
        if not image_dir.is_dir():
            raise AnnotationError(f"image directory not found: {image_dir} (needed for image sizes)")
        files = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        images = []
        for i, p in enumerate(files):
            w, h = _read_image_size(p)
            images.append(ImageInfo(i, p.name, w, h))
    aset = AnnotationSet(images=list(images))
    for im in aset.images:
        txt = label_dir / (Path(im.file).stem + ".txt")
        if not txt.exists():
            continue
        for lineno, line in enumerate(txt.read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split()
            try:
                if len(parts) != 5:
                    raise ValueError("expected 5 fields")
                c = int(parts[0])
                cx, cy, w, h = (float(v) for v in parts[1:])
            except ValueError as e:
                raise AnnotationError(f"{txt}:{lineno}: malformed line {line!r} ({e})") from None
            if not all(0.0 <= v <= 1.0 for v in (cx, cy, w, h)):
                raise AnnotationError(f"{txt}:{lineno}: normalised values outside [0, 1]")
            if not 0 <= c < len(CLASS_NAMES):
                raise AnnotationError(f"{txt}:{lineno}: class id {c} out of range")
            aset.boxes.append(BoxAnnotation(im.id, c, (
                (cx - w / 2) * im.width, (cy - h / 2) * im.height,
                (cx + w / 2) * im.width, (cy + h / 2) * im.height)))
    return aset


def write_yolo(aset: AnnotationSet, label_dir) -> None:
    label_dir = Path(label_dir)
    label_dir.mkdir(parents=True, exist_ok=True)
    groups = aset.by_image()
    for im in aset.images:
        lines = []
        for b in groups.get(im.id, []):
            x1, y1, x2, y2 = b.box
            lines.append(f"{b.class_id} {(x1 + x2) / 2 / im.width:.6f} {(y1 + y2) / 2 / im.height:.6f} "
                         f"{(x2 - x1) / im.width:.6f} {(y2 - y1) / im.height:.6f}")
        (label_dir / (Path(im.file).stem + ".txt")).write_text("\n".join(lines) + ("\n" if lines else ""))


# ---------------------------------------------------------------------------
# COCO json


def parse_coco(path) -> AnnotationSet:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise AnnotationError(f"COCO file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise AnnotationError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise AnnotationError(f"{path}: top level must be a JSON object")
    for key in ("images", "annotations", "categories"):
        if not isinstance(doc.get(key), list):
            raise AnnotationError(f"{path}: missing or invalid '{key}' list")
    try:
        cat_map = {c["id"]: _class_id(c["name"]) for c in doc["categories"]}
        images = [ImageInfo(int(im["id"]), im["file_name"], int(im["width"]), int(im["height"]))
                  for im in doc["images"]]
    except KeyError as e:
        raise AnnotationError(f"{path}: schema violation, missing field {e}") from None
    known = {im.id for im in images}
    aset = AnnotationSet(images=images)
    for ann in doc["annotations"]:
        try:
            img_id, cat, (x, y, w, h) = ann["image_id"], ann["category_id"], ann["bbox"]
        except (KeyError, ValueError, TypeError):
            raise AnnotationError(f"{path}: malformed annotation {ann!r}") from None
        if img_id not in known:
            raise AnnotationError(f"{path}: annotation references missing image {img_id}")
        if cat not in cat_map:
            raise AnnotationError(f"{path}: unknown category id {cat}")
        aset.boxes.append(BoxAnnotation(int(img_id), cat_map[cat], (x, y, x + w, y + h)))
    return aset


def write_coco(aset: AnnotationSet, path) -> None:
    doc = {
        "images": [{"id": im.id, "file_name": im.file, "width": im.width, "height": im.height}
                   for im in aset.images],
        "annotations": [],
        "categories": [{"id": i + 1, "name": n} for i, n in enumerate(CLASS_NAMES)],
    }
    for k, b in enumerate(aset.boxes):
        x1, y1, x2, y2 = b.box
        doc["annotations"].append({
            "id": k + 1, "image_id": b.image_id, "category_id": b.class_id + 1,
            "bbox": [x1, y1, x2 - x1, y2 - y1], "area": (x2 - x1) * (y2 - y1), "iscrowd": 0})
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=1))


# ---------------------------------------------------------------------------
# Pascal VOC xml


def _num(text: str | None, what: str, src) -> float:
    try:
        return float(text)
    except (TypeError, ValueError):
        raise AnnotationError(f"{src}: bad or missing {what}") from None


def parse_voc(xml_dir) -> AnnotationSet:
    xml_dir = Path(xml_dir)
    if not xml_dir.is_dir():
        raise AnnotationError(f"VOC directory not found: {xml_dir}")
    aset = AnnotationSet()
    for i, f in enumerate(sorted(xml_dir.glob("*.xml"))):
        try:
            root = ET.parse(f).getroot()
        except ET.ParseError as e:
            raise AnnotationError(f"{f}: invalid XML ({e})") from None
        fname = root.findtext("filename")
        size = root.find("size")
        if fname is None or size is None:
            raise AnnotationError(f"{f}: missing filename or size")
        im = ImageInfo(i, fname, int(_num(size.findtext("width"), "width", f)),
                       int(_num(size.findtext("height"), "height", f)))
        aset.images.append(im)
        for obj in root.iter("object"):
            bb = obj.find("bndbox")
            if bb is None:
                raise AnnotationError(f"{f}: object without bndbox")
            xmin, ymin, xmax, ymax = (_num(bb.findtext(k), k, f) for k in ("xmin", "ymin", "xmax", "ymax"))
            aset.boxes.append(BoxAnnotation(im.id, _class_id(obj.findtext("name") or ""),
                                            (xmin - 1, ymin - 1, xmax, ymax)))
    return aset


def _fmt(v: float) -> str:
    return str(int(round(v))) if abs(v - round(v)) < 1e-9 else f"{v:.3f}"


def write_voc(aset: AnnotationSet, xml_dir) -> None:
    xml_dir = Path(xml_dir)
    xml_dir.mkdir(parents=True, exist_ok=True)
    groups = aset.by_image()
    for im in aset.images:
        root = ET.Element("annotation")
        ET.SubElement(root, "filename").text = im.file
        size = ET.SubElement(root, "size")
        ET.SubElement(size, "width").text = str(im.width)
        ET.SubElement(size, "height").text = str(im.height)
        ET.SubElement(size, "depth").text = "1"
        for b in groups.get(im.id, []):
            obj = ET.SubElement(root, "object")
            ET.SubElement(obj, "name").text = CLASS_NAMES[b.class_id]
            ET.SubElement(obj, "difficult").text = "0"
            bb = ET.SubElement(obj, "bndbox")
            x1, y1, x2, y2 = b.box
            for k, v in (("xmin", x1 + 1), ("ymin", y1 + 1), ("xmax", x2), ("ymax", y2)):
                ET.SubElement(bb, k).text = _fmt(v)
        ET.indent(root)
        ET.ElementTree(root).write(xml_dir / (Path(im.file).stem + ".xml"), encoding="unicode")


# ---------------------------------------------------------------------------
# dispatch


FORMATS = ("coco", "voc", "yolo")


def read_annotations(fmt: str, path, image_dir=None) -> AnnotationSet:
    if fmt == "coco":
        return parse_coco(path)
    if fmt == "voc":
        return parse_voc(path)
    if fmt == "yolo":
        return parse_yolo(path, image_dir=image_dir)
    raise AnnotationError(f"unknown annotation format {fmt!r}; choose from {FORMATS}")


def write_annotations(fmt: str, aset: AnnotationSet, path) -> None:
    if fmt == "coco":
        write_coco(aset, path)
    elif fmt == "voc":
        write_voc(aset, path)
    elif fmt == "yolo":
        write_yolo(aset, path)
    else:
        raise AnnotationError(f"unknown annotation format {fmt!r}; choose from {FORMATS}")
