"""Neural primitives on NCHW tensors, each with its backward rule.

Convolutions are cross-correlations with zero padding. Dense kernels go
through an im2col matrix and a batched matmul; depthwise kernels loop over
taps, which is cheaper than im2col when every channel has its own filter.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, record

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass
class ConvParams:
    kernel: Tensor                      # (C_out, C_in // groups, kh, kw)
    bias: Optional[Tensor] = None       # (C_out,)
    stride: int = 1
    padding: int = 0
    groups: int = 1

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1] * self.groups

    @property
    def is_depthwise(self) -> bool:
        return self.kernel.shape[1] == 1 and self.groups == self.kernel.shape[0]

    @property
    def is_pointwise(self) -> bool:
        return self.kernel.shape[2:] == (1, 1) and self.groups == 1

    def param_count(self) -> int:
        return self.kernel.size + (self.bias.size if self.bias is not None else 0)


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM
    mode: str = "train"                 # "train" | "infer"
    track: bool = True                  # update running stats in train mode

    @classmethod
    def identity(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(gamma=Tensor(np.ones(channels, dtype), requires_grad=True),
                   beta=Tensor(np.zeros(channels, dtype), requires_grad=True),
                   running_mean=Tensor(np.zeros(channels, dtype)),
                   running_var=Tensor(np.ones(channels, dtype)))

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def param_count(self) -> int:
        return self.gamma.size + self.beta.size


def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_dense(x: np.ndarray, w: np.ndarray, stride: int, pad: int):
    """Returns (output, saved) where ``saved`` feeds ``_conv_dense_back``."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = _out_extent(h, kh, stride, pad), _out_extent(wd, kw, stride, pad)
    if kh == kw == 1 and stride == 1 and pad == 0:
        cols = x.reshape(n, c, h * wd)
    else:
        xp = _pad(x, pad)
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        # (n, c*kh*kw, ho*wo) im2col matrix
        cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    out = np.matmul(w.reshape(o, -1), cols).reshape(n, o, ho, wo)
    return out, cols


def _conv_dense_back(g, cols, w, x_shape, stride, pad):
    o, c, kh, kw = w.shape
    n, _, ho, wo = g.shape
    gm = g.reshape(n, o, ho * wo)
    gw = np.zeros((o, cols.shape[1]), dtype=g.dtype)
    for i in range(n):
        gw += gm[i] @ cols[i].T
    gcols = np.matmul(w.reshape(o, -1).T, gm)
    h, wd = x_shape[2], x_shape[3]
    if kh == kw == 1 and stride == 1 and pad == 0:
        return gcols.reshape(n, c, h, wd), gw.reshape(w.shape)
    gcols = gcols.reshape(n, c, kh, kw, ho, wo)
    gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * (ho - 1) + 1:stride,
                j:j + stride * (wo - 1) + 1:stride] += gcols[:, :, i, j]
    return np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + wd]), gw.reshape(w.shape)


def _conv_depthwise(xp, k, stride, ho, wo):
    # k: (c, kh, kw)
    c, kh, kw = k.shape
    out = np.zeros((xp.shape[0], c, ho, wo), dtype=np.result_type(xp, k))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i:i + stride * (ho - 1) + 1:stride,
                      j:j + stride * (wo - 1) + 1:stride] * k[None, :, i, j, None, None]
    return out


def _conv_depthwise_back(g, xp, k, stride):
    c, kh, kw = k.shape
    ho, wo = g.shape[2:]
    gxp = np.zeros(xp.shape, dtype=g.dtype)
    gk = np.empty_like(k)
    for i in range(kh):
        for j in range(kw):
            win = (slice(None), slice(None),
                   slice(i, i + stride * (ho - 1) + 1, stride),
                   slice(j, j + stride * (wo - 1) + 1, stride))
            gk[:, i, j] = np.einsum("nchw,nchw->c", g, xp[win])
            gxp[win] += g * k[None, :, i, j, None, None]
    return gxp, gk


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Zero-padded cross-correlation; supports strides and channel groups."""
    if x.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input, got shape {x.shape}")
    n, c, h, wd = x.shape
    w = p.kernel.data
    o, cg, kh, kw = w.shape
    if c % p.groups or o % p.groups or cg * p.groups != c:
        raise ValueError(f"channel/groups mismatch: input has {c} channels, kernel {w.shape}, groups {p.groups}")
    if kh > h + 2 * p.padding or kw > wd + 2 * p.padding:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h}x{wd} (padding {p.padding})")
    s, pad = p.stride, p.padding
    ho, wo = _out_extent(h, kh, s, pad), _out_extent(wd, kw, s, pad)
    xd = x.data

    if p.groups == 1:
        out, cols = _conv_dense(xd, w, s, pad)

        def back_x_w(g):
            return _conv_dense_back(g, cols, w, xd.shape, s, pad)
    elif p.groups == c and cg == 1 and o == c:
        xp = _pad(xd, pad)
        out = _conv_depthwise(xp, w[:, 0], s, ho, wo)

        def back_x_w(g):
            gxp, gk = _conv_depthwise_back(g, xp, w[:, 0], s)
            return np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + wd]), gk[:, None]
    else:
        og = o // p.groups
        parts = [_conv_dense(np.ascontiguousarray(xd[:, gi * cg:(gi + 1) * cg]), w[gi * og:(gi + 1) * og], s, pad)
                 for gi in range(p.groups)]
        out = np.concatenate([q[0] for q in parts], axis=1)

        def back_x_w(g):
            gx = np.empty_like(xd, dtype=g.dtype)
            gw = np.empty_like(w, dtype=g.dtype)
            for gi, (_, cols) in enumerate(parts):
                gxi, gwi = _conv_dense_back(np.ascontiguousarray(g[:, gi * og:(gi + 1) * og]), cols,
                                            w[gi * og:(gi + 1) * og],
                                            (n, cg, h, wd), s, pad)
                gx[:, gi * cg:(gi + 1) * cg] = gxi
                gw[gi * og:(gi + 1) * og] = gwi
            return gx, gw

    inputs = [x, p.kernel]
    if p.bias is not None:
        out = out + p.bias.data[None, :, None, None]
        inputs.append(p.bias)

    def back(g):
        need_x = x.requires_grad
        need_w = p.kernel.requires_grad
        gx = gw = None
        if need_x or need_w:
            gx, gw = back_x_w(g)
        grads = [gx if need_x else None, gw if need_w else None]
        if p.bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return record("conv", out, inputs, back)


def depthwise_conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """One spatial filter per input channel; channel m reads only channel m."""
    if not p.is_depthwise or p.in_channels != x.shape[1]:
        raise ValueError(f"not depthwise params for {x.shape[1]} channels: kernel {p.kernel.shape}, groups {p.groups}")
    return conv2d(x, p)


def pointwise_conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Per-pixel linear mix of channels by a 1x1 kernel."""
    if p.kernel.shape[2:] != (1, 1):
        raise ValueError(f"pointwise kernel must be 1x1, got {p.kernel.shape[2:]}")
    if p.groups != 1:
        raise ValueError("pointwise conv requires groups == 1")
    return conv2d(x, p)


def depthwise_separable_conv2d(x: Tensor, dw: ConvParams, pw: ConvParams) -> Tensor:
    k = dw.kernel.shape[2]
    if k not in (3, 5, 7) or dw.kernel.shape[3] != k:
        raise ValueError(f"separable depthwise kernel must be 3x3, 5x5 or 7x7, got {dw.kernel.shape[2:]}")
    if dw.padding != (k - 1) // 2 or dw.stride != 1:
        raise ValueError("separable depthwise stage must be stride 1 with same padding")
    return pointwise_conv2d(depthwise_conv2d(x, dw), pw)


# ---------------------------------------------------------------------------
# normalization and activations
# ---------------------------------------------------------------------------

def batchnorm2d(x: Tensor, s: BatchNormState) -> Tensor:
    c = x.shape[1]
    if c != s.channels:
        raise ValueError(f"batchnorm expects {s.channels} channels, got {c}")
    gamma, beta = s.gamma.data, s.beta.data
    gshape = (1, c, 1, 1)
    if s.mode == "infer":
        inv = 1.0 / np.sqrt(s.running_var.data + s.eps)
        scale = (gamma * inv).reshape(gshape)
        xhat = (x.data - s.running_mean.data.reshape(gshape)) * inv.reshape(gshape)
        out = x.data * scale + (beta - s.running_mean.data * gamma * inv).reshape(gshape)

        def back(g):
            return (g * scale,
                    (g * xhat).sum(axis=(0, 2, 3)),
                    g.sum(axis=(0, 2, 3)))
        return record("bn", out, (x, s.gamma, s.beta), back)

    m = x.shape[0] * x.shape[2] * x.shape[3]
    if m < 2:
        raise ValueError("batchnorm in train mode needs at least 2 values per channel")
    mean = x.data.mean(axis=(0, 2, 3))
    xc = x.data - mean.reshape(gshape)
    var = (xc * xc).mean(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + s.eps)
    xhat = xc * inv.reshape(gshape)
    out = xhat * gamma.reshape(gshape) + beta.reshape(gshape)
    if s.track:
        mom = s.momentum
        rm, rv = s.running_mean.data, s.running_var.data
        rm *= mom
        rm += (1 - mom) * mean.astype(rm.dtype)
        rv *= mom
        rv += (1 - mom) * (var * m / (m - 1)).astype(rv.dtype)

    def back(g):
        gb = g.sum(axis=(0, 2, 3))
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * gamma.reshape(gshape)
        gx = (inv.reshape(gshape) / m) * (
            m * gxhat - gxhat.sum(axis=(0, 2, 3)).reshape(gshape)
            - xhat * (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(gshape))
        return gx, gg, gb
    return record("bn", out, (x, s.gamma, s.beta), back)


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is 0."""
    mask = x.data > 0
    return record("relu", x.data * mask, (x,), lambda g: (g * mask,))


def softmax_channels(x: Tensor) -> Tensor:
    if x.shape[1] < 2:
        raise ValueError("softmax over channels needs C >= 2")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)
    return record("softmax", y, (x,), back)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def avgpool2d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    """Windowed mean with zero padding; pads count toward the divisor."""
    if stride not in (1, 2):
        raise ValueError(f"pooling stride must be 1 or 2, got {stride}")
    n, c, h, w = x.shape
    ho, wo = _out_extent(h, kernel, stride, padding), _out_extent(w, kernel, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"pooling output would be empty for input {h}x{w}")
    xp = _pad(x.data, padding)
    div = float(kernel * kernel)
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    wins = [(slice(None), slice(None),
             slice(i, i + stride * (ho - 1) + 1, stride),
             slice(j, j + stride * (wo - 1) + 1, stride))
            for i in range(kernel) for j in range(kernel)]
    for win in wins:
        out += xp[win]
    out /= div

    def back(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        gd = g / div
        for win in wins:
            gxp[win] += gd
        return (np.ascontiguousarray(gxp[:, :, padding:padding + h, padding:padding + w]),)
    return record("pool", out, (x,), back)


def _upsample_matrix(n: int, dtype) -> np.ndarray:
    """(2n, n) interpolation weights, half-pixel centres, edges clamped."""
    a = np.zeros((2 * n, n), dtype=dtype)
    for i in range(2 * n):
        src = min(max((i + 0.5) / 2 - 0.5, 0.0), n - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n - 1)
        t = src - lo
        a[i, lo] += 1 - t
        a[i, hi] += t
    return a


def bilinear_upsample2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ValueError(f"bilinear upsampling needs H, W >= 2, got {h}x{w}")
    ah = _upsample_matrix(h, x.dtype)
    aw = _upsample_matrix(w, x.dtype)
    out = ah @ x.data @ aw.T

    def back(g):
        return (ah.T @ g @ aw,)
    return record("upsample", np.ascontiguousarray(out), (x,), back)
