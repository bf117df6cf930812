"""Finite-difference suite over every backward rule, at 64-bit.

Each check draws a random input and parameters from its seed, contracts the
op output with a fixed random cotangent to get a scalar, and compares the
tape gradient with central differences via :func:`grad_check`. The CLI's
``gradcheck`` command and the test suite both run this module.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import blocks, ops
from .dice import dice_loss
from .model import ModelConfig, build
from .ops import BatchNormState
from .tensor import Tensor, concat_channels, grad_check, make_rng, slice_channels

F64 = np.float64
TOL = 1e-4
TOL_BN = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float
    seeds: int

    @property
    def ok(self) -> bool:
        return self.max_rel_err < self.tol

    def line(self) -> str:
        status = "ok" if self.ok else "FAIL"
        return f"{self.name}\t{self.max_rel_err:.3e}\t{self.tol:g}\t{self.seeds}\t{status}"


def _t(rng, *shape, grad=True):
    return Tensor(rng.normal(size=shape), requires_grad=grad, dtype=F64)


def _conv(rng, c_out, c_in, k, groups=1, stride=1, padding=None, bias=True):
    p = blocks.he_conv(rng, c_out, c_in, k, groups=groups, stride=stride, padding=padding,
                       bias=bias, dtype=F64)
    if p.bias is not None:
        p.bias.data[:] = rng.normal(size=c_out)
    return p


def _bn(rng, c, mode="train"):
    s = BatchNormState.identity(c, F64)
    s.gamma.data[:] = rng.uniform(0.5, 1.5, c)
    s.beta.data[:] = rng.normal(size=c)
    s.running_mean.data[:] = rng.normal(size=c)
    s.running_var.data[:] = rng.uniform(0.5, 2.0, c)
    s.mode, s.track = mode, False
    return s


def _contract(y: Tensor, rng) -> Callable[[Tensor], Tensor]:
    w = Tensor(rng.normal(size=y.shape), dtype=F64)
    return lambda t: (t * w).sum()


def _check_all(fwd, wrt, rng, coords=None) -> float:
    """Worst relative error over every tensor in ``wrt`` for scalar(fwd())."""
    loss = _contract(fwd(), rng)
    worst = 0.0
    for i, t in enumerate(wrt):
        worst = max(worst, grad_check(lambda _x: loss(fwd()), t, coords=coords, seed=i))
    return worst


# ---------------------------------------------------------------------------
# op-level checks; each takes a seed and returns the worst relative error
# ---------------------------------------------------------------------------

def check_add(seed):
    rng = make_rng(seed)
    a, b = _t(rng, 2, 3, 4, 4), _t(rng, 2, 3, 4, 4)
    return _check_all(lambda: a + b, [a, b], rng)


def check_mul_div_pow(seed):
    rng = make_rng(seed)
    a = _t(rng, 2, 3, 4)
    b = Tensor(rng.uniform(0.5, 2.0, size=(2, 3, 4)), requires_grad=True, dtype=F64)
    return _check_all(lambda: (a * b - a / b) + b ** 2.5, [a, b], rng)


def check_concat_slice(seed):
    rng = make_rng(seed)
    a, b = _t(rng, 2, 2, 3, 3), _t(rng, 2, 3, 3, 3)
    return _check_all(lambda: slice_channels(concat_channels(a, b), 1, 4), [a, b], rng)


def check_conv2d(seed):
    rng = make_rng(seed)
    x = _t(rng, 2, 3, 7, 7)
    p = _conv(rng, 4, 3, 3, stride=1 + seed % 2)
    return _check_all(lambda: ops.conv2d(x, p), [x, p.kernel, p.bias], rng)


def check_grouped_conv2d(seed):
    rng = make_rng(seed)
    x = _t(rng, 2, 4, 6, 6)
    p = _conv(rng, 6, 4, 3, groups=2)
    return _check_all(lambda: ops.conv2d(x, p), [x, p.kernel, p.bias], rng)


def check_depthwise_conv2d(seed):
    rng = make_rng(seed)
    x = _t(rng, 2, 3, 8, 8)
    k = (3, 5, 7)[seed % 3]
    p = _conv(rng, 3, 3, k, groups=3, bias=False)
    return _check_all(lambda: ops.depthwise_conv2d(x, p), [x, p.kernel], rng)


def check_pointwise_conv2d(seed):
    rng = make_rng(seed)
    x = _t(rng, 2, 4, 5, 5)
    p = _conv(rng, 3, 4, 1)
    return _check_all(lambda: ops.pointwise_conv2d(x, p), [x, p.kernel, p.bias], rng)


def check_separable_conv2d(seed):
    rng = make_rng(seed)
    x = _t(rng, 1, 3, 8, 8)
    dw = _conv(rng, 3, 3, 5, groups=3, bias=False)
    pw = _conv(rng, 4, 3, 1)
    return _check_all(lambda: ops.depthwise_separable_conv2d(x, dw, pw),
                      [x, dw.kernel, pw.kernel, pw.bias], rng)


def check_batchnorm_train(seed):
    rng = make_rng(seed)
    x = _t(rng, 3, 4, 5, 5)
    s = _bn(rng, 4, "train")
    return _check_all(lambda: ops.batchnorm2d(x, s), [x, s.gamma, s.beta], rng)


def check_batchnorm_infer(seed):
    rng = make_rng(seed)
    x = _t(rng, 2, 4, 5, 5)
    s = _bn(rng, 4, "infer")
    return _check_all(lambda: ops.batchnorm2d(x, s), [x, s.gamma, s.beta], rng)


def check_relu(seed):
    rng = make_rng(seed)
    x = _t(rng, 2, 3, 5, 5)
    # keep every value away from the kink so central differences are valid
    x.data[np.abs(x.data) < 1e-3] = 0.5
    return _check_all(lambda: ops.relu(x), [x], rng)


def check_softmax(seed):
    rng = make_rng(seed)
    x = _t(rng, 2, 3, 4, 4)
    return _check_all(lambda: ops.softmax_channels(x), [x], rng)


def check_avgpool(seed):
    rng = make_rng(seed)
    x = _t(rng, 2, 3, 8, 7)
    stride = 1 + seed % 2
    return _check_all(lambda: ops.avgpool2d(x, 3, stride, 1), [x], rng)


def check_upsample(seed):
    rng = make_rng(seed)
    x = _t(rng, 2, 3, 4, 5)
    return _check_all(lambda: ops.bilinear_upsample2x(x), [x], rng)


def check_dice(seed):
    rng = make_rng(seed)
    p = Tensor(rng.uniform(0.01, 0.99, size=(2, 8, 8)), requires_grad=True, dtype=F64)
    g = (rng.random((2, 8, 8)) < 0.4).astype(F64)
    return grad_check(lambda t: dice_loss(t, g).value, p)


def check_es_block(seed):
    rng = make_rng(seed)
    x = _t(rng, 2, 4, 8, 8)
    p = blocks.make_es_block(rng, 4, 6, (3, 5, 7)[seed % 3], dtype=F64)
    p.bn.mode, p.bn.track = "train", False
    params = [x, p.dw.kernel, p.expand.kernel, p.squeeze.kernel, p.bn.gamma, p.bn.beta]
    return _check_all(lambda: blocks.es_block(x, p), params, rng, coords=24)


def check_dmr_block(seed):
    rng = make_rng(seed)
    x = _t(rng, 2, 4, 8, 8)
    p = blocks.make_dmr_block(rng, 4, dtype=F64)
    bns = [p.bn1, p.bn2, p.bn3, p.bn4, p.bn_short]
    for bn in bns:
        bn.mode, bn.track = "train", False
    params = [x] + [c.kernel for c in (p.f3_1, p.f5_1, p.f3_2, p.f5_2, p.f1_3, p.f1_2)]
    params += [p.f1_3.bias] + [t for bn in bns for t in (bn.gamma, bn.beta)]
    return _check_all(lambda: blocks.dmr_block(x, p), params, rng, coords=24)


MICRO = ModelConfig(stem_width=4, stage_widths=(4, 4, 4, 4), repeat=1, expansion=1,
                    input_size=(32, 32))


def check_end_to_end(seed, coords: int = 6):
    """Model forward + Dice loss on a 2x(1,3,32,32) batch, w.r.t. the image and a sample of parameters."""
    rng = make_rng(seed)
    cfg = ModelConfig(**{**MICRO.to_dict(), "seed": seed})
    m = build(cfg, dtype=F64)
    x = Tensor(rng.uniform(0, 1, size=(2, 3, 32, 32)), dtype=F64)
    y = (rng.random((2, 1, 32, 32)) < 0.3).astype(F64)

    def loss(_t=None):
        probs = m(x, mode="train", track_stats=False)
        return dice_loss(slice_channels(probs, 1, 2), y).value

    named = list(m.named_parameters())
    picks = [named[i][1] for i in rng.choice(len(named), size=4, replace=False)]
    worst = grad_check(loss, x, coords=coords, seed=seed)
    for i, t in enumerate(picks):
        worst = max(worst, grad_check(loss, t, coords=min(coords, t.size), seed=seed + i))
    return worst


CHECKS = {
    "add": (check_add, TOL),
    "mul_div_pow": (check_mul_div_pow, TOL),
    "concat_slice": (check_concat_slice, TOL),
    "conv2d": (check_conv2d, TOL),
    "grouped_conv2d": (check_grouped_conv2d, TOL),
    "depthwise_conv2d": (check_depthwise_conv2d, TOL),
    "pointwise_conv2d": (check_pointwise_conv2d, TOL),
    "separable_conv2d": (check_separable_conv2d, TOL),
    "batchnorm_train": (check_batchnorm_train, TOL_BN),
    "batchnorm_infer": (check_batchnorm_infer, TOL_BN),
    "relu": (check_relu, TOL),
    "softmax": (check_softmax, TOL),
    "avgpool": (check_avgpool, TOL),
    "upsample": (check_upsample, TOL),
    "dice_loss": (check_dice, TOL),
    "es_block": (check_es_block, TOL),
    "dmr_block": (check_dmr_block, TOL),
    "end_to_end": (check_end_to_end, TOL_BN),
}


def run(names=None, seeds: int = 20, log=None) -> list[CheckResult]:
    out = []
    for name in names or CHECKS:
        fn, tol = CHECKS[name]
        worst = max(fn(s) for s in range(seeds))
        res = CheckResult(name, worst, tol, seeds)
        if log is not None:
            log(res.line())
        out.append(res)
    return out
