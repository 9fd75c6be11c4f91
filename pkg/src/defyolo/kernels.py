"""Forward/backward kernels for every primitive layer of the detector.

Convolutions go through an explicit column buffer laid out as
``(N, C_in * k * k, H_out * W_out)`` with taps in row-major kernel order.
The deformable path builds the same buffer from bilinear samples, so a zero
offset field reproduces the standard convolution bit for bit.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from . import _deform_jit as _jit
from .tensor import ShapeError, Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.03


def out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def kernel_grid(k: int) -> list[tuple[int, int]]:
    """Integer tap offsets of a ``k x k`` kernel, row-major, centred on zero."""
    r = k // 2
    return [(dy, dx) for dy in range(-r, k - r) for dx in range(-r, k - r)]


# ---------------------------------------------------------------------------
# standard convolution


def _im2col(x: np.ndarray, k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = x.shape
    if k == 1 and stride == 1 and pad == 0:
        return x.reshape(n, c, h * w)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, k * k, ho, wo), dtype=x.dtype)
    ey, ex = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for ky in range(k):
        for kx in range(k):
            cols[:, :, ky * k + kx] = xp[:, :, ky:ky + ey:stride, kx:kx + ex:stride]
    return cols.reshape(n, c * k * k, ho * wo)


def _col2im(cols: np.ndarray, shape, k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = shape
    if k == 1 and stride == 1 and pad == 0:
        return cols.reshape(shape)
    cols = cols.reshape(n, c, k * k, ho, wo)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    ey, ex = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for ky in range(k):
        for kx in range(k):
            dxp[:, :, ky:ky + ey:stride, kx:kx + ex:stride] += cols[:, :, ky * k + kx]
    if pad:
        return dxp[:, :, pad:pad + h, pad:pad + w]
    return dxp


def _check_conv(x: Tensor, weight: Tensor, stride: int, padding: int):
    n, c, h, w = x.shape
    cout, cin, k, k2 = weight.shape
    if k != k2:
        raise ShapeError("square kernels only")
    if cin != c:
        raise ShapeError(f"conv expects {cin} input channels, got {c}")
    ho, wo = out_size(h, k, stride, padding), out_size(w, k, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"nonpositive conv output size {ho}x{wo}")
    return n, c, h, w, cout, k, ho, wo


def _conv_from_cols(cols, x_parents, weight: Tensor, bias: Tensor | None, n, cout, ho, wo, op,
                    cols_backward):
    """Shared matmul + bias stage for standard and deformable convolution."""
    w2 = weight.data.reshape(cout, -1)
    y = np.matmul(w2, cols)
    if bias is not None:
        y += bias.data.reshape(1, cout, 1)
    parents = (*x_parents, weight) + ((bias,) if bias is not None else ())
    out = Tensor.from_op(y.reshape(n, cout, ho, wo), parents, op)
    if out.requires_grad:

        def _back(g):
            g3 = g.reshape(n, cout, ho * wo)
            if weight.requires_grad:
                dw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0)
                weight.accumulate(dw.reshape(weight.shape))
            if bias is not None and bias.requires_grad:
                bias.accumulate(g3.sum(axis=(0, 2)).reshape(bias.shape))
            if any(p.requires_grad for p in x_parents):
                cols_backward(np.matmul(w2.T, g3))

        out.backward_fn = _back
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """``out(i0) = sum_n w(i_n) f(i0 + i_n)`` summed over input channels.

    ``weight`` has shape ``(C_out, C_in, k, k)``; ``bias`` shape
    ``(1, C_out, 1, 1)``. Zero padding outside the input.
    """
    n, c, h, w, cout, k, ho, wo = _check_conv(x, weight, stride, padding)
    cols = _im2col(x.data, k, stride, padding, ho, wo)

    def _cols_back(dcols):
        x.accumulate(_col2im(dcols, x.shape, k, stride, padding, ho, wo))

    return _conv_from_cols(cols, (x,), weight, bias, n, cout, ho, wo, "conv2d", _cols_back)


# ---------------------------------------------------------------------------
# bilinear sampling and deformable convolution


def bilinear_sample(plane: np.ndarray, y: float, x: float):
    """Bilinearly sample a 2-D ``plane`` at fractional ``(y, x)``.

    Corners outside the plane read as zero. Returns ``(value, dval_dy,
    dval_dx, corner_weights)`` where ``corner_weights`` maps each in-bounds
    integer corner ``(row, col)`` to its interpolation weight, i.e. the
    gradient of the value with respect to that corner.
    """
    h, w = plane.shape
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    ly, lx = y - y0, x - x0
    hy, hx = 1.0 - ly, 1.0 - lx

    def v(r, c):
        return plane[r, c] if 0 <= r < h and 0 <= c < w else 0.0

    v00, v01, v10, v11 = v(y0, x0), v(y0, x0 + 1), v(y0 + 1, x0), v(y0 + 1, x0 + 1)
    val = hy * hx * v00 + hy * lx * v01 + ly * hx * v10 + ly * lx * v11
    dy = hx * (v10 - v00) + lx * (v11 - v01)
    dx = hy * (v01 - v00) + ly * (v11 - v10)
    weights = {}
    for (r, c), wt in (((y0, x0), hy * hx), ((y0, x0 + 1), hy * lx),
                       ((y0 + 1, x0), ly * hx), ((y0 + 1, x0 + 1), ly * lx)):
        if 0 <= r < h and 0 <= c < w:
            weights[(r, c)] = wt
    return float(val), float(dy), float(dx), weights


def deform_conv2d(x: Tensor, offset: Tensor, weight: Tensor, bias: Tensor | None = None,
                  stride: int = 1, padding: int = 0) -> Tensor:
    """Deformable convolution: every tap samples ``f(i0 + i_n + delta_n)``.

    ``offset`` has shape ``(N, 2*k*k, H_out, W_out)`` holding a
    ``(dy, dx)`` pair per tap (channels ``2n`` and ``2n+1``), shared across
    input channels. No modulation term.
    """
    n, c, h, w, cout, k, ho, wo = _check_conv(x, weight, stride, padding)
    kk = k * k
    if offset.shape != (n, 2 * kk, ho, wo):
        raise ShapeError(f"offset shape {offset.shape} != {(n, 2 * kk, ho, wo)}")
    dt = x.dtype
    L = ho * wo
    taps = np.arange(kk)
    base_y = (np.arange(ho) * stride - padding)[None, :, None] + (taps // k)[:, None, None]
    base_x = (np.arange(wo) * stride - padding)[None, None, :] + (taps % k)[:, None, None]
    off = offset.data.reshape(n, kk, 2, ho, wo)
    py = (base_y[None].astype(dt) + off[:, :, 0]).reshape(n, kk * L)
    px = (base_x[None].astype(dt) + off[:, :, 1]).reshape(n, kk * L)
    idx, valid, wts, ly, lx = _jit.corner_geometry(py, px, h, w)
    xf = np.ascontiguousarray(x.data).reshape(n, c, h * w)
    cols = np.empty((n, c, kk * L), dtype=dt)
    _jit.gather_cols(xf, idx, wts, cols)
    cols = cols.reshape(n, c * kk, L)

    def _cols_back(dcols):
        dcols = np.ascontiguousarray(dcols).reshape(n, c, kk * L)
        if x.requires_grad:
            dxf = np.zeros((n, c, h * w), dtype=dt)
            _jit.scatter_cols(dcols, idx, wts, dxf)
            x.accumulate(dxf.reshape(x.shape))
        if offset.requires_grad:
            gy = np.zeros((n, kk * L), dtype=dt)
            gx = np.zeros((n, kk * L), dtype=dt)
            _jit.offset_grads(dcols, xf, idx, valid, ly, lx, gy, gx)
            doff = np.stack([gy.reshape(n, kk, ho, wo), gx.reshape(n, kk, ho, wo)], axis=2)
            offset.accumulate(doff.reshape(offset.shape))

    return _conv_from_cols(cols, (x, offset), weight, bias, n, cout, ho, wo, "deform_conv2d",
                           _cols_back)


# ---------------------------------------------------------------------------
# normalisation and activations


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = BN_MOMENTUM,
                eps: float = BN_EPS) -> Tensor:
    """Per-channel batch norm. Training mode updates running stats in place."""
    n, c, h, w = x.shape
    if gamma.shape != (1, c, 1, 1) or running_mean.shape != (c,):
        raise ShapeError(f"batchnorm channel mismatch: input has {c} channels")
    xd = x.data
    if training:
        m = n * h * w
        mean = xd.mean(axis=(0, 2, 3))
        xc = xd - mean.reshape(1, c, 1, 1)
        var = np.mean(xc * xc, axis=(0, 2, 3))
        if n == 1 and np.any(var == 0):
            raise ValueError("batchnorm: batch of one with zero variance in training mode")
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv.reshape(1, c, 1, 1)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(xd.dtype)
        xhat = (xd - running_mean.astype(xd.dtype).reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    y = xhat * gamma.data + beta.data
    out = Tensor.from_op(y, (x, gamma, beta), "batchnorm2d")
    if out.requires_grad:

        def _back(g):
            if gamma.requires_grad:
                gamma.accumulate((g * xhat).sum(axis=(0, 2, 3)).reshape(gamma.shape))
            if beta.requires_grad:
                beta.accumulate(g.sum(axis=(0, 2, 3)).reshape(beta.shape))
            if x.requires_grad:
                dxhat = g * gamma.data
                if training:
                    m = n * h * w
                    s1 = dxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                    s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                    dx = (dxhat - s1 / m - xhat * (s2 / m)) * inv.reshape(1, c, 1, 1)
                else:
                    dx = dxhat * inv.reshape(1, c, 1, 1)
                x.accumulate(dx)

        out.backward_fn = _back
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    out = Tensor.from_op(s, (x,), "sigmoid")
    if out.requires_grad:
        out.backward_fn = lambda g: x.accumulate(g * s * (1 - s))
    return out


def silu(x: Tensor) -> Tensor:
    s = expit(x.data)
    out = Tensor.from_op(x.data * s, (x,), "silu")
    if out.requires_grad:
        out.backward_fn = lambda g: x.accumulate(g * (s * (1 + x.data * (1 - s))))
    return out


def softmax_channel(x: Tensor, bins: int | None = None) -> Tensor:
    """Softmax along the channel axis, optionally in consecutive groups of ``bins``."""
    n, c, h, w = x.shape
    bins = c if bins is None else bins
    if c % bins:
        raise ShapeError(f"{c} channels do not split into groups of {bins}")
    z = x.data.reshape(n, c // bins, bins, h, w)
    e = np.exp(z - z.max(axis=2, keepdims=True))
    p = e / e.sum(axis=2, keepdims=True)
    out = Tensor.from_op(p.reshape(x.shape), (x,), "softmax")
    if out.requires_grad:

        def _back(g):
            g5 = g.reshape(p.shape)
            x.accumulate((p * (g5 - (g5 * p).sum(axis=2, keepdims=True))).reshape(x.shape))

        out.backward_fn = _back
    return out


def activation(kind: str, x: Tensor, **kw) -> Tensor:
    table = {"silu": silu, "sigmoid": sigmoid, "softmax_channel": softmax_channel}
    if kind not in table:
        raise ValueError(f"unknown activation {kind!r}")
    return table[kind](x, **kw)


# ---------------------------------------------------------------------------
# pooling, resampling, concatenation


def maxpool2d(x: Tensor, k: int = 5, stride: int = 1, pad: int = 2) -> Tensor:
    """Sliding max. Gradient goes to the first row-major maximiser of each window."""
    if pad >= k:
        raise ValueError("maxpool padding must be smaller than the kernel")
    n, c, h, w = x.shape
    ho, wo = out_size(h, k, stride, pad), out_size(w, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    ey, ex = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    best = xp[:, :, 0:ey:stride, 0:ex:stride].copy()
    arg = np.zeros(best.shape, dtype=np.int16)
    for t in range(1, k * k):
        ky, kx = divmod(t, k)
        v = xp[:, :, ky:ky + ey:stride, kx:kx + ex:stride]
        better = v > best
        np.copyto(best, v, where=better)
        arg[better] = t
    out = Tensor.from_op(best, (x,), "maxpool2d")
    if out.requires_grad:

        def _back(g):
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for t in range(k * k):
                ky, kx = divmod(t, k)
                dxp[:, :, ky:ky + ey:stride, kx:kx + ex:stride] += np.where(arg == t, g, 0)
            x.accumulate(dxp[:, :, pad:pad + h, pad:pad + w])

        out.backward_fn = _back
    return out


def upsample_nearest2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    y = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)
    out = Tensor.from_op(np.ascontiguousarray(y), (x,), "upsample")
    if out.requires_grad:
        out.backward_fn = lambda g: x.accumulate(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))
    return out


def concat_channels(xs: list[Tensor]) -> Tensor:
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"concat: {t.shape} incompatible with {xs[0].shape}")
    out = Tensor.from_op(np.concatenate([t.data for t in xs], axis=1), xs, "concat")
    if out.requires_grad:

        def _back(g):
            start = 0
            for t in xs:
                stop = start + t.shape[1]
                if t.requires_grad:
                    t.accumulate(g[:, start:stop])
                start = stop

        out.backward_fn = _back
    return out


def split_channels(x: Tensor, sizes: list[int]) -> list[Tensor]:
    """Inverse of ``concat_channels``: views onto consecutive channel ranges."""
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"split sizes {sizes} do not cover {x.shape[1]} channels")
    outs = []
    start = 0
    for s in sizes:
        sl = slice(start, start + s)
        o = Tensor.from_op(x.data[:, sl], (x,), "split")
        if o.requires_grad:

            def _back(g, sl=sl):
                full = np.zeros_like(x.data)
                full[:, sl] = g
                x.accumulate(full)

            o.backward_fn = _back
        outs.append(o)
        start += s
    return outs
