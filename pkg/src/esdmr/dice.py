"""Soft Dice objective: per-image squared Dice complement summed over a batch.

Two gradient routes exist on purpose: ``dice_loss`` is built from tape
primitives so autodiff differentiates it, while ``dice_loss_grad`` is the
closed-form derivative. Tests hold them against each other.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, as_tensor

DSC_EPS = 1e-6


@dataclass
class LossReport:
    loss: float
    per_image_dsc: list = field(default_factory=list)
    value: Tensor | None = None         # scalar on the active tape


def _check(pred, ref):
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    r = ref.data if isinstance(ref, Tensor) else np.asarray(ref)
    if p.shape != r.shape:
        raise ValueError(f"prediction shape {p.shape} != reference shape {r.shape}")
    return p, r


def dsc(pred, ref, eps: float = DSC_EPS) -> float:
    """2*sum(p*g) / (sum(p^2) + sum(g^2) + eps); 1.0 when both maps are empty."""
    p, r = _check(pred, ref)
    p = p.astype(np.float64)
    r = r.astype(np.float64)
    denom = (p * p).sum() + (r * r).sum()
    if denom == 0:
        return 1.0
    return float(2 * (p * r).sum() / (denom + eps))


def dice_loss(pred: Tensor, ref, eps: float = DSC_EPS) -> LossReport:
    """Sum over images of (1 - DSC)^2. ``pred`` is (N, ...) foreground probability."""
    p, r = _check(pred, ref)
    if p.ndim < 2 or p.shape[0] < 1:
        raise ValueError("dice_loss needs a non-empty batch with a leading batch axis")
    pred = as_tensor(pred)
    axes = tuple(range(1, p.ndim))
    g = Tensor(r.astype(pred.dtype))
    inter = (pred * g).sum(axes)
    sq = (pred * pred).sum(axes)
    g2 = (r.astype(np.float64) ** 2).sum(axis=axes)
    denom = sq + Tensor((g2 + eps).astype(pred.dtype))
    d = (2.0 * inter) / denom
    empty = (p.astype(np.float64) ** 2).sum(axis=axes) + g2 == 0
    if empty.any():
        # exact 0/0 case: both maps empty counts as perfect agreement
        d = d + Tensor(empty.astype(pred.dtype))
    comp = 1.0 - d
    total = (comp * comp).sum()
    return LossReport(loss=float(total.data), per_image_dsc=[float(v) for v in d.data],
                      value=total)


def dsc_grad(pred, ref, eps: float = DSC_EPS) -> np.ndarray:
    """dDSC/dp_q = [2 g_q S - 4 p_q I] / S^2 with S = sum p^2 + sum g^2 (+eps)."""
    p, r = _check(pred, ref)
    p = p.astype(np.float64)
    r = r.astype(np.float64)
    raw = (p * p).sum() + (r * r).sum()
    if raw == 0:
        return np.zeros_like(p)
    s = raw + eps
    inter = (p * r).sum()
    return (2 * r * s - 4 * p * inter) / (s * s)


def dice_loss_grad(pred, ref, eps: float = DSC_EPS) -> np.ndarray:
    """Closed-form gradient of ``dice_loss`` w.r.t. the prediction, image by image.

    d/dp (1 - DSC)^2 = -2 (1 - DSC) dDSC/dp.
    """
    p, r = _check(pred, ref)
    out = np.empty(p.shape, dtype=np.float64)
    for i in range(p.shape[0]):
        d = dsc(p[i], r[i], eps)
        out[i] = -2.0 * (1.0 - d) * dsc_grad(p[i], r[i], eps)
    return out
