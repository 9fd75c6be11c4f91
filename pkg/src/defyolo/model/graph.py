"""Assembles the layer table into a runnable detector graph."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import kernels as K
from ..tensor import ShapeError, Tensor
from .config import DEFORM_C2F_LAYERS, DETECT_STRIDES, SPPF_LAYER, ConfigError, ModelConfig
from .modules import C2f, CBS, SPPF, Detect, Module


@dataclass
class BlockSpec:
    index: int
    kind: str
    from_: tuple[int, ...]
    channels_out: int
    repeats: int
    shortcut: bool
    module: Module | None


class LayerGraph(Module):
    """Ordered layer table with realised parameters.

    ``forward`` returns the three raw head maps (strides 8, 16, 32), each
    with ``4 * reg_max + num_classes`` channels.
    """

    detect_strides = DETECT_STRIDES

    def __init__(self, config: ModelConfig, layers: list[BlockSpec], shape_table):
        self.config = config
        self.layers = layers
        self.shape_table = shape_table
        self.model = [spec.module for spec in layers]

    # parameters -------------------------------------------------------
    def children(self):
        for i, spec in enumerate(self.layers):
            if spec.module is not None:
                yield f"model.{i}", spec.module

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state(self) -> dict[str, np.ndarray]:
        """Every checkpointed array (parameters then buffers per layer, in order)."""
        out = {}
        for name, m in self.children():
            for k, t in m.named_parameters(name + "."):
                out[k] = t.data
            for k, b in m.named_buffers(name + "."):
                out[k] = b
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    @property
    def dtype(self):
        return self.layers[0].module.conv.dtype

    # execution ----------------------------------------------------------
    def forward(self, x: Tensor) -> list[Tensor]:
        n = x.shape[0]
        s = self.config.imgsz
        if x.shape[1:] != (3, s, s):
            raise ShapeError(f"expected input (N, 3, {s}, {s}), got {x.shape}")
        outs: list = []
        y = x
        for spec in self.layers:
            if spec.from_ == (-1,):
                inp = y
            else:
                inp = [y if f == -1 else outs[f] for f in spec.from_]
            if spec.kind == "Upsample":
                y = K.upsample_nearest2x(inp)
            elif spec.kind == "Concat":
                y = K.concat_channels(inp)
            else:
                y = spec.module(inp)
            expect = self.shape_table[spec.index]
            got = [t.shape[1:] for t in y] if isinstance(y, list) else y.shape[1:]
            if got != expect:
                raise ShapeError(f"layer {spec.index} produced {got}, shape table says {expect}")
            outs.append(y)
        return y

    __call__ = forward


def build(config: ModelConfig, seed: int = 0, dtype=np.float32) -> LayerGraph:
    """Realise ``config`` with seeded Kaiming-uniform weights and zero offsets."""
    rng = np.random.default_rng(seed)
    chans: list[int] = []
    spatial: list[int] = []
    shape_table: list = []
    specs: list[BlockSpec] = []
    c_prev, hw_prev = 3, config.imgsz
    for row in config.layers:
        src = [i if i != -1 else len(chans) - 1 for i in row.from_]
        c_in = c_prev if row.from_ == (-1,) else None
        n = config.repeats(row.repeats)
        module = None
        shortcut = False
        kind = row.module
        if kind == "CBS":
            c2 = config.channels(row.args[0])
            k, s = row.args[1], row.args[2]
            module = CBS(c_in, c2, k, s, rng, dtype)
            hw = K.out_size(hw_prev, k, s, k // 2)
        elif kind == "C2f":
            c2 = config.channels(row.args[0])
            shortcut = bool(row.args[1])
            deform = config.deform_c2f and row.index in DEFORM_C2F_LAYERS
            module = C2f(c_in, c2, n, shortcut, rng, dtype, deform)
            kind = module.kind
            hw = hw_prev
        elif kind == "SPPF":
            c2 = config.channels(row.args[0])
            deform = config.deform_sppf and row.index == SPPF_LAYER
            module = SPPF(c_in, c2, row.args[1], rng, dtype, deform)
            kind = module.kind
            hw = hw_prev
        elif kind == "Upsample":
            c2, hw = c_prev, hw_prev * 2
        elif kind == "Concat":
            sizes = {spatial[i] for i in src}
            if len(sizes) != 1:
                raise ConfigError(f"layer {row.index}: concat of mismatched sizes {sizes}")
            c2, hw = sum(chans[i] for i in src), spatial[src[0]]
        elif kind == "Detect":
            ch = [chans[i] for i in src]
            module = Detect(config.num_classes, config.reg_max, ch, DETECT_STRIDES,
                            config.imgsz, rng, dtype)
            c2 = 4 * config.reg_max + config.num_classes
            hw = None
            shape_table.append([(c2, spatial[i], spatial[i]) for i in src])
        else:
            raise ConfigError(f"layer {row.index}: unknown module {row.module!r}")
        if c_in is None and kind not in ("Concat", "Detect"):
            raise ConfigError(f"layer {row.index}: {kind} takes a single input")
        if hw is not None:
            if hw <= 0:
                raise ConfigError(f"layer {row.index}: nonpositive feature size")
            shape_table.append((c2, hw, hw))
        specs.append(BlockSpec(row.index, kind, row.from_, c2, n, shortcut, module))
        chans.append(c2)
        spatial.append(hw if hw is not None else 0)
        c_prev, hw_prev = c2, hw
    graph = LayerGraph(config, specs, shape_table)
    expected = [config.imgsz // s for s in DETECT_STRIDES]
    if [t[1] for t in shape_table[-1]] != expected:
        raise ConfigError(f"detect maps {shape_table[-1]} do not match strides {DETECT_STRIDES}")
    return graph


def count_params(graph: LayerGraph) -> int:
    """Trainable parameter count: conv weights, BN affine terms, offset convs, head biases."""
    return int(sum(t.data.size for t in graph.parameters()))


def layer_flops(graph: LayerGraph, imgsz: int | None = None) -> list[tuple[int, str, float, object]]:
    """Per-layer ``(index, kind, flops, output shape)`` at batch 1."""
    imgsz = imgsz or graph.config.imgsz
    shapes: list = []
    rows = []
    prev = (1, 3, imgsz, imgsz)
    for spec in graph.layers:
        ins = [prev if f == -1 else shapes[f] for f in spec.from_]
        if spec.kind == "Upsample":
            n, c, h, w = ins[0]
            f, out = 0, (n, c, 2 * h, 2 * w)
        elif spec.kind == "Concat":
            f, out = 0, (ins[0][0], sum(s[1] for s in ins), ins[0][2], ins[0][3])
        elif spec.kind == "Detect":
            f, out = spec.module.flops(ins)
        else:
            f, out = spec.module.flops(ins[0])
        rows.append((spec.index, spec.kind, float(f), out))
        shapes.append(out)
        prev = out
    return rows


def count_flops(graph: LayerGraph, imgsz: int | None = None) -> float:
    """Forward GFLOPs at batch 1 (multiply-accumulate = 2 FLOPs)."""
    return sum(r[2] for r in layer_flops(graph, imgsz)) / 1e9


def count_deform_blocks(graph: LayerGraph) -> int:
    """Number of deformable blocks: each Deform_CBS in SPPF counts once, each Deform_C2f once."""
    n = 0
    for spec in graph.layers:
        if spec.kind == "Deform_SPPF":
            n += sum(1 for cbs in (spec.module.cv1, spec.module.cv2) if cbs.deform)
        elif spec.kind == "Deform_C2f":
            n += 1
    return n


def copy_shared_weights(src: LayerGraph, dst: LayerGraph) -> None:
    """Copy every same-named array of ``src`` into ``dst`` (offset branches stay as they are)."""
    s = src.state()
    for name, arr in dst.state().items():
        if name in s:
            if s[name].shape != arr.shape:
                raise ShapeError(f"{name}: {s[name].shape} vs {arr.shape}")
            arr[...] = s[name]


def all_cbs(graph: LayerGraph):
    def walk(m):
        if isinstance(m, CBS):
            yield m
        for _, c in m.children():
            yield from walk(c)
    yield from walk(graph)
