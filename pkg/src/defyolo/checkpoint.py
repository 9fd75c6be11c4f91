"""Binary weight checkpoints.

Layout (little-endian)::

    b"DEFY" | u32 version | u32 count |
    count x ( u32 name_len | name utf-8 | 4 x u32 shape | f32 payload )

Arrays with fewer than four dimensions are stored with trailing 1s
(a BN running mean of length C is written as (C, 1, 1, 1)).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DEFY"
VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


class ShapeMismatchError(CheckpointError):
    """Checkpoint tensors do not line up with the model; names the first offender."""


def _shape4(shape) -> tuple[int, int, int, int]:
    if len(shape) > 4:
        raise CheckpointError(f"cannot store rank-{len(shape)} array")
    return tuple(shape) + (1,) * (4 - len(shape))


def save_state(state: dict[str, np.ndarray], path) -> None:
    chunks = [MAGIC, _U32.pack(VERSION), _U32.pack(len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr)
        chunks += [_U32.pack(len(raw)), raw, struct.pack("<4I", *_shape4(a.shape)),
                   a.astype("<f4").tobytes()]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b"".join(chunks))


def read_state(path) -> dict[str, np.ndarray]:
    """Parse a checkpoint into ``name -> float32 array`` (shapes as stored, rank 4)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a DEFY checkpoint (bad magic)")
    (version,), (count,) = _U32.unpack_from(buf, 4), _U32.unpack_from(buf, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for k in range(count):
        what = f"tensor #{k}"
        try:
            (n,) = _U32.unpack_from(buf, pos)
            pos += 4
            if pos + n > len(buf):
                raise struct.error
            name = buf[pos:pos + n].decode("utf-8")
            what = f"tensor #{k} ({name})"
            pos += n
            shape = struct.unpack_from("<4I", buf, pos)
            pos += 16
            size = 4 * int(np.prod(shape))
            if pos + size > len(buf):
                raise struct.error
        except (struct.error, UnicodeDecodeError):
            raise CheckpointError(f"{path}: truncated or corrupt at {what}") from None
        out[name] = np.frombuffer(buf, "<f4", count=size // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += size
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes after {count} tensors")
    return out


def load_into(graph, state: dict[str, np.ndarray]) -> None:
    """Copy ``state`` into ``graph`` after validating every name and shape first."""
    target = graph.state()
    for name, dst in target.items():
        if name not in state:
            raise ShapeMismatchError(f"shape mismatch at tensor {name!r}: model expects "
                                     f"{_shape4(dst.shape)}, checkpoint has no such tensor "
                                     f"(was it saved from a different variant?)")
        src = state[name]
        if _shape4(src.shape) != _shape4(dst.shape):
            raise ShapeMismatchError(f"shape mismatch at tensor {name!r}: checkpoint "
                                     f"{_shape4(src.shape)}, model {_shape4(dst.shape)}")
    extra = [n for n in state if n not in target]
    if extra:
        raise ShapeMismatchError(f"shape mismatch at tensor {extra[0]!r}: present in checkpoint, "
                                 f"absent from model ({len(extra)} unexpected in total)")
    for name, dst in target.items():
        dst[...] = state[name].reshape(dst.shape)


def save(graph, path) -> None:
    save_state(graph.state(), path)


def load(path, config, dtype=np.float32):
    """Build ``config`` and fill it from the checkpoint at ``path``."""
    from .model.graph import build

    state = read_state(path)
    graph = build(config, dtype=dtype)
    load_into(graph, state)
    return graph
