"""Binary segmentation metrics.

Confusion-count measures (Se, Sp, A, F1, J) work on binary maps. AUC,
E-measure and S-measure take foreground probabilities. Degenerate cases
(empty reference, empty prediction, single-class maps) return defined
values and record a flag string in the optional ``flags`` set.
"""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field

import math

import numpy as np
from scipy import ndimage

N_THRESHOLDS = 256
_EPS = np.finfo(np.float64).eps


@dataclass
class Confusion:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass
class MetricsReport:
    se: float
    sp: float
    acc: float
    auc: float
    f1: float
    jaccard: float
    fbw: float
    mae: float
    e_phi_max: float
    s_alpha: float
    flags: set = field(default_factory=set, compare=False)

    COLUMNS = ("se", "sp", "acc", "auc", "f1", "jaccard", "fbw", "mae", "e_phi_max", "s_alpha")

    def values(self) -> list:
        return [getattr(self, c) for c in self.COLUMNS]


def _flag(flags, name):
    if flags is not None:
        flags.add(name)


def _binary(a, what: str) -> np.ndarray:
    arr = np.asarray(a)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{what} must be binary (0/1)")
    return arr.astype(np.int64)


def confusion(pred_binary, ref_binary) -> Confusion:
    p = _binary(pred_binary, "prediction")
    r = _binary(ref_binary, "reference")
    if p.shape != r.shape:
        raise ValueError(f"prediction shape {p.shape} != reference shape {r.shape}")
    return Confusion(tp=int((p * r).sum()), tn=int(((1 - p) * (1 - r)).sum()),
                     fp=int((p * (1 - r)).sum()), fn=int(((1 - p) * r).sum()))


def _ratio(num, den, empty_value, flags, name):
    if den == 0:
        _flag(flags, name)
        return float(empty_value)
    return num / den


def basic_metrics(c: Confusion, flags: set | None = None) -> tuple:
    """(Se, Sp, A, F1, J). Empty denominators mean vacuous agreement and give 1."""
    se = _ratio(c.tp, c.tp + c.fn, 1.0, flags, "se_undefined")
    sp = _ratio(c.tn, c.tn + c.fp, 1.0, flags, "sp_undefined")
    acc = (c.tp + c.tn) / c.total
    f1 = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, 1.0, flags, "f1_undefined")
    jac = _ratio(c.tp, c.tp + c.fp + c.fn, 1.0, flags, "jaccard_undefined")
    return se, sp, acc, f1, jac


def precision(c: Confusion) -> float:
    if c.tp + c.fp == 0:
        return 1.0 if c.fn == 0 else 0.0
    return c.tp / (c.tp + c.fp)


def roc_points(pred_probs, ref_binary, thresholds=N_THRESHOLDS) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, TPR) arrays in increasing order, including (0, 0) and (1, 1)."""
    p = np.asarray(pred_probs, dtype=np.float64).ravel()
    r = _binary(ref_binary, "reference").ravel()
    if thresholds is None:
        ts = np.unique(p)
    else:
        ts = np.linspace(0.0, 1.0, int(thresholds))
    pos = r.sum()
    neg = r.size - pos
    order = np.argsort(p)
    ps = p[order]
    rs = r[order]
    # positives/negatives at or above each threshold via suffix sums
    cum_pos = np.concatenate([np.cumsum(rs[::-1])[::-1], [0]])
    cum_neg = np.concatenate([np.cumsum((1 - rs)[::-1])[::-1], [0]])
    start = np.searchsorted(ps, ts, side="left")
    tpr = cum_pos[start] / pos
    fpr = cum_neg[start] / neg
    fpr = np.concatenate([[0.0], fpr[::-1], [1.0]])
    tpr = np.concatenate([[0.0], tpr[::-1], [1.0]])
    return fpr, tpr


def auc(pred_probs, ref_binary, thresholds=N_THRESHOLDS, flags: set | None = None) -> float:
    """Trapezoidal ROC area over ``thresholds`` evenly spaced cut points in [0, 1].

    ``thresholds=None`` uses every distinct prediction value instead.
    """
    r = _binary(ref_binary, "reference")
    pos = r.sum()
    if pos == 0 or pos == r.size:
        _flag(flags, "auc_degenerate")
        return 0.5
    fpr, tpr = roc_points(pred_probs, r, thresholds)
    return float(np.trapezoid(tpr, fpr))


def _gaussian_weighted_pr(p: np.ndarray, r: np.ndarray, sigma: float = 5.0, size: int = 7):
    """Neighbourhood-weighted precision/recall with a Gaussian dependency kernel."""
    g = r.astype(bool)
    err = np.abs(p.astype(np.float64) - r)
    if g.all():
        dist = np.zeros(r.shape)
        near = err
    else:
        dist, idx = ndimage.distance_transform_edt(~g, return_indices=True)
        near = err.copy()
        bg = ~g
        near[bg] = err[idx[0][bg], idx[1][bg]] if g.any() else err[bg]
    ax = np.arange(size) - size // 2
    k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma ** 2))
    k /= k.sum()
    ea = ndimage.correlate(near, k, mode="constant")
    mine = err.copy()
    sel = g & (ea < err)
    mine[sel] = ea[sel]
    weight = np.ones(r.shape)
    weight[~g] = 2 - np.exp(np.log(0.5) / 5 * dist[~g])
    ew = mine * weight
    tpw = g.sum() - ew[g].sum()
    fpw = ew[~g].sum()
    rec = 1 - ew[g].mean() if g.any() else 1.0
    prec = tpw / (tpw + fpw) if tpw + fpw > 0 else 0.0
    return prec, rec


def weighted_fscore(pred_binary, ref_binary, beta: float = 1.0, omega: str = "uniform",
                    flags: set | None = None) -> float:
    """(1 + b^2) P R / (b^2 P + R).

    ``omega="uniform"`` weights every error equally, which reduces P and R to
    plain precision and recall. ``omega="gaussian"`` is a non-canonical
    neighbourhood-weighted variant (sigma 5, 7x7 window).
    """
    b2 = beta * beta
    if omega == "uniform":
        c = confusion(pred_binary, ref_binary)
        den = (1 + b2) * c.tp + b2 * c.fn + c.fp
        if den == 0 or c.tp == 0:
            _flag(flags, "fbw_zero_denominator")
            return 0.0
        return (1 + b2) * c.tp / den
    if omega == "gaussian":
        p = _binary(pred_binary, "prediction")
        r = _binary(ref_binary, "reference")
        prec, rec = _gaussian_weighted_pr(p, r)
        den = b2 * prec + rec
        if den == 0:
            _flag(flags, "fbw_zero_denominator")
            return 0.0
        return float((1 + b2) * prec * rec / den)
    raise ValueError(f"unknown omega weighting {omega!r}")


def mae(pred, ref) -> float:
    p = np.asarray(pred, dtype=np.float64)
    r = np.asarray(ref, dtype=np.float64)
    if p.shape != r.shape:
        raise ValueError(f"prediction shape {p.shape} != reference shape {r.shape}")
    # fsum is correctly rounded, so the value does not depend on summation order
    return math.fsum(np.abs(p - r).ravel()) / p.size


def _enhanced_alignment(fm: np.ndarray, gt: np.ndarray) -> float:
    if gt.sum() == 0:
        enhanced = 1.0 - fm
    elif gt.sum() == gt.size:
        enhanced = fm
    else:
        a_fm = fm - fm.mean()
        a_gt = gt - gt.mean()
        align = 2 * a_gt * a_fm / (a_gt * a_gt + a_fm * a_fm + _EPS)
        enhanced = (align + 1) ** 2 / 4
    return float(enhanced.mean())


def e_phi_max(pred_probs, ref_binary, thresholds: int = N_THRESHOLDS) -> float:
    """Max over binarisation thresholds of the mean enhanced-alignment map."""
    p = np.asarray(pred_probs, dtype=np.float64)
    g = _binary(ref_binary, "reference").astype(np.float64)
    best = 0.0
    seen = set()
    for t in np.linspace(0.0, 1.0, thresholds):
        fm = p >= t
        key = fm.tobytes()
        if key in seen:
            continue
        seen.add(key)
        best = max(best, _enhanced_alignment(fm.astype(np.float64), g))
    return best


def _object_score(values: np.ndarray) -> float:
    x = values.mean()
    return float(2 * x / (x * x + 1 + values.std() + _EPS))


def _ssim(p: np.ndarray, g: np.ndarray, c1=0.01 ** 2, c2=0.03 ** 2) -> float:
    mx, my = p.mean(), g.mean()
    vx, vy = p.var(), g.var()
    cov = ((p - mx) * (g - my)).mean()
    return float((2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))


def s_object(p: np.ndarray, g: np.ndarray) -> float:
    fg = g == 1
    mu = fg.mean()
    o_f = _object_score(p[fg]) if fg.any() else 0.0
    o_b = _object_score(1 - p[~fg]) if (~fg).any() else 0.0
    return float(mu * o_f + (1 - mu) * o_b)


def s_region(p: np.ndarray, g: np.ndarray) -> float:
    h, w = g.shape
    if g.any():
        cy, cx = np.argwhere(g).mean(axis=0).round().astype(int)
    else:
        cy, cx = round(h / 2), round(w / 2)
    cy, cx = int(cy) + 1, int(cx) + 1
    total = 0.0
    for rows in (slice(0, cy), slice(cy, h)):
        for cols in (slice(0, cx), slice(cx, w)):
            pr, gr = p[rows, cols], g[rows, cols]
            if pr.size:
                total += pr.size / p.size * _ssim(pr, gr)
    return total


def s_alpha(pred_probs, ref_binary, alpha: float = 0.5) -> float:
    """alpha * object similarity + (1 - alpha) * region similarity, floored at 0."""
    p = np.asarray(pred_probs, dtype=np.float64)
    g = _binary(ref_binary, "reference").astype(np.float64)
    if p.ndim != 2:
        p, g = p.reshape(p.shape[-2:]), g.reshape(g.shape[-2:])
    score = 0.0
    if alpha > 0:
        score += alpha * s_object(p, g)
    if alpha < 1:
        score += (1 - alpha) * s_region(p, g)
    return max(0.0, score)


def evaluate_pair(pred_probs, ref_binary, threshold: float = 0.5) -> MetricsReport:
    """Every metric for one foreground-probability map against its reference.

    Pixels strictly above ``threshold`` count as foreground.
    """
    p = np.asarray(pred_probs, dtype=np.float64)
    r = _binary(ref_binary, "reference")
    p2 = p.reshape(p.shape[-2:]) if p.ndim > 2 else p
    r2 = r.reshape(r.shape[-2:]) if r.ndim > 2 else r
    pb = (p2 > threshold).astype(np.int64)
    flags: set = set()
    c = confusion(pb, r2)
    se, sp, acc, f1, jac = basic_metrics(c, flags)
    return MetricsReport(
        se=se, sp=sp, acc=acc,
        auc=auc(p2, r2, flags=flags),
        f1=f1, jaccard=jac,
        fbw=weighted_fscore(pb, r2, flags=flags),
        mae=mae(p2, r2),
        e_phi_max=e_phi_max(p2, r2),
        s_alpha=s_alpha(p2, r2),
        flags=flags,
    )


def mean_report(reports) -> MetricsReport:
    reports = list(reports)
    if not reports:
        raise ValueError("cannot average an empty list of reports")
    vals = np.mean([r.values() for r in reports], axis=0)
    flags = set().union(*(r.flags for r in reports))
    return MetricsReport(*map(float, vals), flags=flags)


def write_csv(rows, stream, mean: MetricsReport | None = None):
    """``rows`` is an iterable of (image id, MetricsReport); values use 6 decimals."""
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(("image",) + MetricsReport.COLUMNS)
    for name, rep in rows:
        w.writerow([name] + [f"{v:.6f}" for v in rep.values()])
    if mean is not None:
        w.writerow(["mean"] + [f"{v:.6f}" for v in mean.values()])


def report_dict(rep: MetricsReport) -> dict:
    d = dataclasses.asdict(rep)
    d["flags"] = sorted(rep.flags)
    return d
