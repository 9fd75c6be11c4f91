"""Rank-4 tensors with a minimal reverse-mode autodiff tape.

Every value flowing through the detector is a ``Tensor`` of shape
``(N, C, H, W)``. Ops record a backward closure and their parent tensors;
``backward`` walks the resulting DAG in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an op."""


class TapeError(RuntimeError):
    """Raised for malformed tapes (non-scalar loss, cycles, non-finite values)."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor must be rank 4 (N, C, H, W), got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str) -> "Tensor":
        """Wrap an op result; record it on the tape when any parent needs grad."""
        out = cls.__new__(cls)
        if data.ndim != 4:
            raise ShapeError(f"op {op} produced rank {data.ndim} output")
        out.data = data
        out.grad = None
        out.op = op
        out.backward_fn = None
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out.parents = tuple(parents) if track else ()
        return out

    # ------------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    # elementwise sugar ----------------------------------------------------
    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", self, other)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def backward(self, retain_intermediate: bool = False) -> None:
        backward(self, retain_intermediate=retain_intermediate)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def elementwise(op_kind: str, a: Tensor, b) -> Tensor:
    """``out = a (op) b`` with ``b`` a same-shape tensor or a Python scalar."""
    if op_kind not in ("add", "sub", "mul"):
        raise ValueError(f"unknown elementwise op {op_kind!r}")
    if _is_scalar(b):
        s = float(b)
        if op_kind == "add":
            data = a.data + s
        elif op_kind == "sub":
            data = a.data - s
        else:
            data = a.data * s
        out = Tensor.from_op(data.astype(a.dtype, copy=False), (a,), op_kind)
        if out.requires_grad:
            scale = s if op_kind == "mul" else 1.0

            def _back(g):
                a.accumulate(g * scale if scale != 1.0 else g)

            out.backward_fn = _back
        return out

    if not isinstance(b, Tensor):
        raise TypeError(f"expected Tensor or scalar, got {type(b).__name__}")
    if a.shape != b.shape:
        raise ShapeError(f"{op_kind}: shape mismatch {a.shape} vs {b.shape}")
    if op_kind == "add":
        data = a.data + b.data
    elif op_kind == "sub":
        data = a.data - b.data
    else:
        data = a.data * b.data
    out = Tensor.from_op(data, (a, b), op_kind)
    if out.requires_grad:

        def _back(g):
            if op_kind == "mul":
                if a.requires_grad:
                    a.accumulate(g * b.data)
                if b.requires_grad:
                    b.accumulate(g * a.data)
                return
            if a.requires_grad:
                a.accumulate(g)
            if b.requires_grad:
                b.accumulate(-g if op_kind == "sub" else g)

        out.backward_fn = _back
    return out


def tensor_sum(x: Tensor) -> Tensor:
    out = Tensor.from_op(np.sum(x.data, dtype=x.dtype).reshape(1, 1, 1, 1), (x,), "sum")
    if out.requires_grad:

        def _back(g):
            x.accumulate(np.broadcast_to(g.reshape(()), x.shape))

        out.backward_fn = _back
    return out


def reshape(x: Tensor, shape: tuple[int, int, int, int]) -> Tensor:
    out = Tensor.from_op(x.data.reshape(shape), (x,), "reshape")
    if out.requires_grad:
        out.backward_fn = lambda g: x.accumulate(g.reshape(x.shape))
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative DFS post-order; raises on a back edge."""
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    state[id(root)] = 1
    while stack:
        node, i = stack[-1]
        if i < len(node.parents):
            stack[-1] = (node, i + 1)
            p = node.parents[i]
            s = state.get(id(p))
            if s == 1:
                raise TapeError(f"cycle detected at op {p.op}")
            if s is None:
                state[id(p)] = 1
                stack.append((p, 0))
        else:
            stack.pop()
            state[id(node)] = 2
            order.append(node)
    return order


def backward(loss: Tensor, retain_intermediate: bool = False) -> dict[int, np.ndarray]:
    """Populate ``.grad`` on every grad-requiring leaf reachable from ``loss``.

    Seeds the scalar loss with 1. Leaf gradients accumulate (``+=``) across
    calls; clear them with ``zero_grad``. Intermediate gradients are dropped
    after use unless ``retain_intermediate`` is set. Returns a map from
    ``id(leaf)`` to its gradient array.
    """
    if loss.shape != (1, 1, 1, 1):
        raise TapeError(f"backward needs a scalar (1,1,1,1) loss, got {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = _topo_order(loss)
    seed = np.ones((1, 1, 1, 1), dtype=loss.dtype)
    if loss.backward_fn is None:
        loss.accumulate(seed)
        return {id(loss): loss.grad}
    loss.grad = seed
    grads: dict[int, np.ndarray] = {}
    for node in reversed(order):
        if node.backward_fn is None:
            if node.requires_grad and node.grad is not None:
                grads[id(node)] = node.grad
            continue
        g = node.grad
        if g is None:
            continue
        node.backward_fn(g)
        if not retain_intermediate:
            node.grad = None
    return grads


def parameters_zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-6,
               wrt: Sequence[int] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps the input tensors to a scalar tensor. Inputs must be double
    precision. Relative error per element is ``|a - n| / max(1, |a|, |n|)``.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("grad_check requires float64 inputs")
    idx = range(len(inputs)) if wrt is None else wrt
    for t in inputs:
        t.grad = None
        t.requires_grad = False
    for i in idx:
        inputs[i].requires_grad = True
    out = fn(*inputs)
    if not np.all(np.isfinite(out.data)):
        raise TapeError("non-finite loss at the check point")
    backward(out)
    worst = 0.0
    for i in idx:
        t = inputs[i]
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        numeric = np.empty(flat.size)
        with no_grad():
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                fp = fn(*inputs).item()
                flat[j] = orig - eps
                fm = fn(*inputs).item()
                flat[j] = orig
                numeric[j] = (fp - fm) / (2 * eps)
        a = analytic.reshape(-1)
        err = np.abs(a - numeric) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(numeric)))
        if not np.all(np.isfinite(err)):
            raise TapeError(f"non-finite gradient for input {i}")
        worst = max(worst, float(err.max(initial=0.0)))
    return worst
