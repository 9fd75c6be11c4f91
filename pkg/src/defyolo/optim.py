"""SGD with momentum and the warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

# Momentum and weight decay are not given by the training recipe; these are
# the usual detector defaults and are flagged as such in config dumps, as are
# the stabilizers (gradient clipping, reduced offset-branch step).
DEFAULT_MOMENTUM = 0.937
DEFAULT_WEIGHT_DECAY = 5e-4
NON_PAPER_DEFAULTS = ("momentum", "weight_decay", "lr_final", "clip_norm", "offset_lr_mult")


@dataclass
class OptimState:
    lr: float = 1e-2
    momentum: float = DEFAULT_MOMENTUM
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    momentum_buffers: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")


def sgd_step(params, grads, state: OptimState, decay_mask=None) -> None:
    """In-place update ``v = m*v + g + wd*w; w -= lr*v``.

    ``params`` are tensors, ``grads`` matching arrays (``None`` is treated
    as a zero gradient). ``decay_mask`` optionally disables weight decay per
    parameter (used for BN affine terms and biases).
    """
    for i, (p, g) in enumerate(zip(params, grads)):
        w = p.data
        if g is None:
            g = np.zeros_like(w)
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {w.shape}")
        wd = state.weight_decay if decay_mask is None or decay_mask[i] else 0.0
        d = g + wd * w if wd else g
        buf = state.momentum_buffers.get(id(p))
        if buf is None:
            buf = np.zeros_like(w)
            state.momentum_buffers[id(p)] = buf
        buf *= state.momentum
        buf += d
        w -= state.lr * buf


def lr_schedule(step: float, warmup_epochs: float = 30, total_epochs: float = 200,
                lr0: float = 1e-2, lr_final: float | None = None) -> float:
    """Linear warmup from 0 to ``lr0`` followed by cosine decay to ``lr_final``.

    ``step`` is measured in epochs (fractional values allowed).
    """
    if lr_final is None:
        lr_final = lr0 / 100
    if not 0 <= step <= total_epochs:
        raise ValueError(f"step {step} outside [0, {total_epochs}]")
    if warmup_epochs > 0 and step < warmup_epochs:
        return lr0 * step / warmup_epochs
    span = total_epochs - warmup_epochs
    t = 1.0 if span <= 0 else (step - warmup_epochs) / span
    return lr_final + (lr0 - lr_final) * (1 + math.cos(math.pi * t)) / 2


def clip_grad_norm(grads, max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping. ``None`` entries are skipped.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads if g is not None))
    if total > max_norm:
        f = max_norm / total
        for g in grads:
            if g is not None:
                g *= f
    return total
