"""Building blocks: CBS / Deform_CBS, Bottleneck, C2f, SPPF and the Detect head.

Each block owns its parameters as ``Tensor`` attributes and its running
statistics as numpy arrays. ``named_parameters`` / ``named_buffers`` walk
attributes in definition order, which fixes checkpoint tensor order.
"""

from __future__ import annotations

import math

import numpy as np

from .. import kernels as K
from ..tensor import Tensor

# per-element FLOP charges used by the complexity counter
BN_FLOPS = 2
SILU_FLOPS = 4
ADD_FLOPS = 1
SAMPLE_FLOPS_PER_CHANNEL = 7  # 4 mul + 3 add per bilinear tap and channel
SAMPLE_FLOPS_PER_TAP = 10  # corner weights and indices per tap and location


class Module:
    training = False

    def children(self):
        for name, v in vars(self).items():
            if isinstance(v, Module):
                yield name, v
            elif isinstance(v, list) and v and isinstance(v[0], Module):
                for i, m in enumerate(v):
                    yield f"{name}.{i}", m

    def named_parameters(self, prefix: str = ""):
        for name, v in vars(self).items():
            if isinstance(v, Tensor):
                yield prefix + name, v
        for name, m in self.children():
            yield from m.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = ""):
        for name, v in vars(self).items():
            if isinstance(v, np.ndarray):
                yield prefix + name, v
        for name, m in self.children():
            yield from m.named_buffers(f"{prefix}{name}.")

    def train(self, mode: bool = True):
        self.training = mode
        for _, m in self.children():
            m.train(mode)
        return self

    def eval(self):
        return self.train(False)


def _kaiming_uniform(rng, shape, dtype):
    fan_in = shape[1] * shape[2] * shape[3]
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class ConvLayer(Module):
    """Plain convolution with bias (used for the Detect head outputs)."""

    def __init__(self, c1, c2, k, rng, dtype, bias_value=None):
        self.weight = _kaiming_uniform(rng, (c2, c1, k, k), dtype)
        if bias_value is None:
            bound = 1.0 / math.sqrt(c1 * k * k)
            b = rng.uniform(-bound, bound, size=(1, c2, 1, 1))
        else:
            b = np.full((1, c2, 1, 1), bias_value)
        self.bias = Tensor(b.astype(dtype), requires_grad=True)
        self.k = k

    def __call__(self, x):
        return K.conv2d(x, self.weight, self.bias, 1, self.k // 2)

    def flops(self, shape):
        n, c, h, w = shape
        cout = self.weight.shape[0]
        return 2 * self.k ** 2 * c * cout * h * w + cout * h * w, (n, cout, h, w)


class BatchNorm(Module):
    def __init__(self, c, dtype):
        self.weight = Tensor(np.ones((1, c, 1, 1), dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros((1, c, 1, 1), dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)

    def __call__(self, x):
        return K.batchnorm2d(x, self.weight, self.bias, self.running_mean, self.running_var,
                             self.training)


class CBS(Module):
    """Conv (no bias) -> BatchNorm -> SiLU, optionally deformable."""

    def __init__(self, c1, c2, k, s, rng, dtype, deform=False):
        self.conv = _kaiming_uniform(rng, (c2, c1, k, k), dtype)
        self.bn = BatchNorm(c2, dtype)
        self.k, self.s, self.p = k, s, k // 2
        self.deform = deform
        if deform:
            self.offset = OffsetBranch(c1, k, s, dtype)

    @property
    def kind(self):
        return "Deform_CBS" if self.deform else "CBS"

    def __call__(self, x):
        if self.deform:
            off = self.offset(x)
            y = K.deform_conv2d(x, off, self.conv, None, self.s, self.p)
        else:
            y = K.conv2d(x, self.conv, None, self.s, self.p)
        return K.silu(self.bn(y))

    def flops(self, shape):
        n, c, h, w = shape
        cout = self.conv.shape[0]
        ho, wo = K.out_size(h, self.k, self.s, self.p), K.out_size(w, self.k, self.s, self.p)
        L = ho * wo
        f = 2 * self.k ** 2 * c * cout * L + (BN_FLOPS + SILU_FLOPS) * cout * L
        if self.deform:
            kk = self.k ** 2
            f += 2 * kk * c * 2 * kk * L + 2 * kk * L
            f += SAMPLE_FLOPS_PER_CHANNEL * kk * c * L + SAMPLE_FLOPS_PER_TAP * kk * L
        return f, (n, cout, ho, wo)


class OffsetBranch(Module):
    """Standard conv predicting 2*k*k offset channels; zero-initialised."""

    def __init__(self, c1, k, s, dtype):
        self.weight = Tensor(np.zeros((2 * k * k, c1, k, k), dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros((1, 2 * k * k, 1, 1), dtype=dtype), requires_grad=True)
        self.k, self.s = k, s

    def __call__(self, x):
        return K.conv2d(x, self.weight, self.bias, self.s, self.k // 2)


class Bottleneck(Module):
    def __init__(self, c, shortcut, rng, dtype, deform=False):
        self.cv1 = CBS(c, c, 3, 1, rng, dtype, deform)
        self.cv2 = CBS(c, c, 3, 1, rng, dtype, deform)
        self.add = shortcut

    def __call__(self, x):
        y = self.cv2(self.cv1(x))
        return x + y if self.add else y

    def flops(self, shape):
        f1, s1 = self.cv1.flops(shape)
        f2, s2 = self.cv2.flops(s1)
        extra = ADD_FLOPS * int(np.prod(s2)) if self.add else 0
        return f1 + f2 + extra, s2


class C2f(Module):
    def __init__(self, c1, c2, n, shortcut, rng, dtype, deform=False):
        self.c = c2 // 2
        self.cv1 = CBS(c1, 2 * self.c, 1, 1, rng, dtype)
        self.m = [Bottleneck(self.c, shortcut, rng, dtype, deform) for _ in range(n)]
        self.cv2 = CBS((2 + n) * self.c, c2, 1, 1, rng, dtype)
        self.deform = deform

    @property
    def kind(self):
        return "Deform_C2f" if self.deform else "C2f"

    def __call__(self, x):
        ys = K.split_channels(self.cv1(x), [self.c, self.c])
        for b in self.m:
            ys.append(b(ys[-1]))
        return self.cv2(K.concat_channels(ys))

    def flops(self, shape):
        f, s = self.cv1.flops(shape)
        half = (s[0], self.c, s[2], s[3])
        for b in self.m:
            fb, half = b.flops(half)
            f += fb
        fc, out = self.cv2.flops((s[0], (2 + len(self.m)) * self.c, s[2], s[3]))
        return f + fc, out


class SPPF(Module):
    def __init__(self, c1, c2, k, rng, dtype, deform=False):
        c_ = c1 // 2
        self.cv1 = CBS(c1, c_, 1, 1, rng, dtype, deform)
        self.cv2 = CBS(c_ * 4, c2, 1, 1, rng, dtype, deform)
        self.k = k
        self.deform = deform

    @property
    def kind(self):
        return "Deform_SPPF" if self.deform else "SPPF"

    def __call__(self, x):
        y = [self.cv1(x)]
        for _ in range(3):
            y.append(K.maxpool2d(y[-1], self.k, 1, self.k // 2))
        return self.cv2(K.concat_channels(y))

    def flops(self, shape):
        f, s = self.cv1.flops(shape)
        f += 3 * (self.k ** 2 - 1) * int(np.prod(s))
        fc, out = self.cv2.flops((s[0], 4 * s[1], s[2], s[3]))
        return f + fc, out


class Detect(Module):
    """Anchor-free decoupled head: per scale a box branch and a class branch."""

    def __init__(self, nc, reg_max, ch, strides, imgsz, rng, dtype):
        self.nc, self.reg_max = nc, reg_max
        c2 = max(16, ch[0] // 4, reg_max * 4)
        c3 = max(ch[0], min(nc, 100))
        self.cv2 = []
        self.cv3 = []
        for c, s in zip(ch, strides):
            self.cv2.append(_HeadBranch(c, c2, 4 * reg_max, 1.0, rng, dtype))
            self.cv3.append(_HeadBranch(c, c3, nc, math.log(5 / nc / (imgsz / s) ** 2), rng, dtype))

    def __call__(self, xs):
        return [K.concat_channels([b(x), c(x)]) for x, b, c in zip(xs, self.cv2, self.cv3)]

    def flops(self, shapes):
        total = 0
        outs = []
        for s, b, c in zip(shapes, self.cv2, self.cv3):
            fb, ob = b.flops(s)
            fc, oc = c.flops(s)
            total += fb + fc
            outs.append((s[0], ob[1] + oc[1], s[2], s[3]))
        return total, outs


class _HeadBranch(Module):
    def __init__(self, c1, c_mid, c_out, bias_value, rng, dtype):
        self.layers = [CBS(c1, c_mid, 3, 1, rng, dtype), CBS(c_mid, c_mid, 3, 1, rng, dtype)]
        self.pred = ConvLayer(c_mid, c_out, 1, rng, dtype, bias_value=bias_value)

    def __call__(self, x):
        for m in self.layers:
            x = m(x)
        return self.pred(x)

    def flops(self, shape):
        f = 0
        for m in self.layers:
            fm, shape = m.flops(shape)
            f += fm
        fp, shape = self.pred.flops(shape)
        return f + fp, shape
