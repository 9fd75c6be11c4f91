"""Model configuration and its plain-text key/value file format.

A config file holds scalar keys (``key = value``) followed by the frozen
YOLOv8 layer table, one ``layer = idx | from | repeats | module | args``
line per layer::

    depth_multiple = 0.33
    width_multiple = 0.50
    ...
    layer = 0 | -1 | 1 | CBS | 64, 3, 2

The layer table always describes the undeformed network; the
``deform_sppf`` / ``deform_c2f`` flags select which blocks are realised
with deformable convolutions.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

DEFORM_C2F_LAYERS = (4, 6, 15, 18, 21)
SPPF_LAYER = 9
DETECT_STRIDES = (8, 16, 32)
CLASS_NAMES = ("cleaver", "gun", "knife", "scissors")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LayerRow:
    index: int
    from_: tuple[int, ...]
    repeats: int
    module: str
    args: tuple


# YOLOv8 detection table (backbone 0-9, neck/head 10-22), unscaled.
YOLOV8_LAYERS = (
    LayerRow(0, (-1,), 1, "CBS", (64, 3, 2)),
    LayerRow(1, (-1,), 1, "CBS", (128, 3, 2)),
    LayerRow(2, (-1,), 3, "C2f", (128, True)),
    LayerRow(3, (-1,), 1, "CBS", (256, 3, 2)),
    LayerRow(4, (-1,), 6, "C2f", (256, True)),
    LayerRow(5, (-1,), 1, "CBS", (512, 3, 2)),
    LayerRow(6, (-1,), 6, "C2f", (512, True)),
    LayerRow(7, (-1,), 1, "CBS", (1024, 3, 2)),
    LayerRow(8, (-1,), 3, "C2f", (1024, True)),
    LayerRow(9, (-1,), 1, "SPPF", (1024, 5)),
    LayerRow(10, (-1,), 1, "Upsample", (2,)),
    LayerRow(11, (-1, 6), 1, "Concat", (1,)),
    LayerRow(12, (-1,), 3, "C2f", (512, False)),
    LayerRow(13, (-1,), 1, "Upsample", (2,)),
    LayerRow(14, (-1, 4), 1, "Concat", (1,)),
    LayerRow(15, (-1,), 3, "C2f", (256, False)),
    LayerRow(16, (-1,), 1, "CBS", (256, 3, 2)),
    LayerRow(17, (-1, 12), 1, "Concat", (1,)),
    LayerRow(18, (-1,), 3, "C2f", (512, False)),
    LayerRow(19, (-1,), 1, "CBS", (512, 3, 2)),
    LayerRow(20, (-1, 9), 1, "Concat", (1,)),
    LayerRow(21, (-1,), 3, "C2f", (1024, False)),
    LayerRow(22, (15, 18, 21), 1, "Detect", ("nc",)),
)


@dataclass
class ModelConfig:
    depth_multiple: float = 0.33
    width_multiple: float = 0.50
    max_channels: int = 1024
    num_classes: int = 4
    reg_max: int = 16
    imgsz: int = 640
    deform_sppf: bool = False
    deform_c2f: bool = False
    focal_loss: bool = False
    layers: tuple[LayerRow, ...] = field(default=YOLOV8_LAYERS)

    def __post_init__(self):
        if self.imgsz % 32:
            raise ConfigError(f"imgsz must be a multiple of 32, got {self.imgsz}")
        if self.num_classes < 1 or self.reg_max < 2:
            raise ConfigError("num_classes >= 1 and reg_max >= 2 required")
        for i, row in enumerate(self.layers):
            if row.index != i:
                raise ConfigError(f"layer table out of order at row {i}")
            for f in row.from_:
                if f >= 0 and f >= i:
                    raise ConfigError(f"layer {i} reads from later layer {f}")

    def channels(self, c: int) -> int:
        return int(math.ceil(min(c, self.max_channels) * self.width_multiple / 8) * 8)

    def repeats(self, n: int) -> int:
        return max(round(n * self.depth_multiple), 1) if n > 1 else n

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    @property
    def variant(self) -> str:
        if self.deform_sppf and self.deform_c2f:
            return "def-yolo"
        if self.deform_sppf:
            return "deform-sppf"
        if self.deform_c2f:
            return "deform-c2f"
        return "baseline"


def baseline_config(**kw) -> ModelConfig:
    return ModelConfig(**kw)


def def_yolo_config(**kw) -> ModelConfig:
    kw.setdefault("deform_sppf", True)
    kw.setdefault("deform_c2f", True)
    kw.setdefault("focal_loss", True)
    return ModelConfig(**kw)


_SCALAR_KEYS = {
    "depth_multiple": float, "width_multiple": float, "max_channels": int,
    "num_classes": int, "reg_max": int, "imgsz": int,
    "deform_sppf": bool, "deform_c2f": bool, "focal_loss": bool,
}


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _parse_arg(tok: str):
    tok = tok.strip()
    if tok in ("True", "False"):
        return tok == "True"
    try:
        return int(tok)
    except ValueError:
        return tok


def parse_config(text: str, source: str = "<string>") -> ModelConfig:
    values: dict = {}
    rows: list[LayerRow] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key == "layer":
            parts = [p.strip() for p in val.split("|")]
            if len(parts) != 5:
                raise ConfigError(f"{source}:{lineno}: layer needs 5 '|'-separated fields")
            try:
                rows.append(LayerRow(int(parts[0]), tuple(int(f) for f in parts[1].split(",")),
                                     int(parts[2]), parts[3],
                                     tuple(_parse_arg(a) for a in parts[4].split(",") if a.strip())))
            except ValueError as e:
                raise ConfigError(f"{source}:{lineno}: {e}") from None
        elif key in _SCALAR_KEYS:
            typ = _SCALAR_KEYS[key]
            try:
                values[key] = _parse_bool(val) if typ is bool else typ(val)
            except ValueError:
                raise ConfigError(f"{source}:{lineno}: bad value for {key}: {val!r}") from None
        else:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
    if rows:
        values["layers"] = tuple(rows)
    return ModelConfig(**values)


def load_config(path) -> ModelConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"model config not found: {path}")
    return parse_config(path.read_text(), str(path))


def format_config(cfg: ModelConfig) -> str:
    lines = ["# DEF-YOLO model config (key = value; layer = idx | from | repeats | module | args)"]
    for key in _SCALAR_KEYS:
        v = getattr(cfg, key)
        lines.append(f"{key} = {str(v).lower() if isinstance(v, bool) else v}")
    lines.append("")
    for row in cfg.layers:
        frm = ",".join(str(f) for f in row.from_)
        args = ", ".join(str(a) for a in row.args)
        lines.append(f"layer = {row.index} | {frm} | {row.repeats} | {row.module} | {args}")
    return "\n".join(lines) + "\n"


def save_config(cfg: ModelConfig, path) -> None:
    Path(path).write_text(format_config(cfg))
