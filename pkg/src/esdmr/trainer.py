"""Optimisation loop: Dice objective, global-norm clipping, Adam, early stopping."""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .dice import dice_loss, dsc
from .model import Model, save
from .tensor import Tape, Tensor, make_rng, slice_channels

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 8
    max_epochs: int = 15
    clip_norm: float = 3.0
    patience: int = 3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    min_delta: float = 1e-4
    max_steps: int | None = None
    recalibrate_bn: bool = True

    def validate(self):
        for name in ("lr", "batch_size", "max_epochs", "clip_norm", "patience", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.patience >= self.max_epochs:
            raise ValueError(f"patience ({self.patience}) must be below max_epochs ({self.max_epochs})")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


class DivergenceError(FloatingPointError):
    pass


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def clip_global_norm(grads, threshold: float = 3.0):
    """Rescale all gradients together so their joint l2 norm is at most ``threshold``.

    Returns (grads, norm before clipping). Below the threshold the input
    arrays are returned untouched.
    """
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    norm = global_norm(grads)
    if norm > threshold:
        scale = threshold / norm
        grads = [g * scale for g in grads]
    return grads, norm


def adam_step(params, grads, state: AdamState, cfg: TrainConfig, names=None) -> None:
    """Bias-corrected Adam, updating ``params`` and ``state`` in place."""
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            name = names[i] if names else f"#{i}"
            raise DivergenceError(f"non-finite gradient for parameter {name}")
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        upd = cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        p.data -= upd.astype(p.data.dtype)


def make_batches(n: int, batch_size: int, rng=None) -> list:
    """Index batches over a (shuffled) permutation; a trailing single sample joins the previous batch."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) == 1:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


def stack(samples, dtype=np.float32):
    x = np.stack([s.image for s in samples]).astype(dtype)
    y = np.stack([s.mask for s in samples]).astype(dtype)
    return x, y


def predict_probs(model: Model, samples, batch_size: int = 8) -> np.ndarray:
    """Foreground probabilities (N, H, W) in inference mode."""
    out = []
    for i in range(0, len(samples), batch_size):
        x, _ = stack(samples[i:i + batch_size], model.dtype)
        out.append(model(x, mode="infer").data[:, 1])
    return np.concatenate(out)


def mean_dsc(model: Model, samples) -> float:
    probs = predict_probs(model, samples)
    return float(np.mean([dsc(p, s.mask[0]) for p, s in zip(probs, samples)]))


def recalibrate_bn(model: Model, samples, batch_size: int = 8) -> None:
    """Replace running statistics by their cumulative average over ``samples``.

    Weights are untouched. Running stats collected during training lag the
    moving weights; refreshing them makes inference match the trained model.
    """
    bns = model.batchnorms()
    saved = [bn.momentum for bn in bns]
    try:
        for k, idx in enumerate(make_batches(len(samples), batch_size)):
            for bn in bns:
                bn.momentum = k / (k + 1)
            x, _ = stack([samples[i] for i in idx], model.dtype)
            model(x, mode="train", track_stats=True)
    finally:
        for bn, mom in zip(bns, saved):
            bn.momentum = mom
        model.set_mode("infer")


def loss_and_grads(model: Model, x: np.ndarray, y: np.ndarray, params=None, track_stats=True):
    params = params if params is not None else model.parameters()
    with Tape() as tape:
        probs = model(Tensor(x), mode="train", track_stats=track_stats)
        report = dice_loss(slice_channels(probs, 1, 2), y)
    grads = tape.backward(report.value, wrt=params)
    return report, grads


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_dsc: float
    lr: float
    wall: float

    def tsv(self) -> str:
        return f"{self.epoch}\t{self.train_loss:.6f}\t{self.val_dsc:.6f}\t{self.lr:g}\t{self.wall:.3f}"


LOG_HEADER = "epoch\ttrain_loss\tval_dsc\tlr\twall_s"


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    best_epoch: int = 0
    best_dsc: float = -math.inf
    best_state: dict | None = None
    diverged: bool = False
    steps: int = 0


def train(model: Model, train_set, val_set, cfg: TrainConfig | None = None, log_stream=None,
          checkpoint_path=None, monitor=None) -> TrainResult:
    """Run the epoch loop and leave ``model`` holding the best-scoring weights.

    ``monitor(model)`` overrides the validation score (mean soft DSC on
    ``val_set``, or on ``train_set`` when there is no validation data).
    """
    cfg = (cfg or TrainConfig()).validate()
    if not train_set:
        raise ValueError("training set is empty")
    rng = make_rng(cfg.seed)
    named = list(model.named_parameters())
    names = [n for n, _ in named]
    params = [p for _, p in named]
    state = AdamState.zeros_like(params)
    score_set = val_set if val_set else train_set
    monitor = monitor or (lambda m: mean_dsc(m, score_set))
    result = TrainResult()
    stale = 0
    if log_stream is not None:
        print(LOG_HEADER, file=log_stream, flush=True)

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for idx in make_batches(len(train_set), cfg.batch_size, rng):
            if cfg.max_steps is not None and result.steps >= cfg.max_steps:
                break
            x, y = stack([train_set[i] for i in idx], model.dtype)
            before = model.state_dict()
            report, grads = loss_and_grads(model, x, y, params)
            try:
                if not math.isfinite(report.loss):
                    raise DivergenceError(f"loss became {report.loss} at step {result.steps + 1}")
                grads, _ = clip_global_norm(grads, cfg.clip_norm)
                adam_step(params, grads, state, cfg, names)
            except DivergenceError as exc:
                log.error("%s; restoring last finite weights", exc)
                model.load_state_dict(before)
                result.diverged = True
                break
            result.steps += 1
            losses.append(report.loss)
            result.step_losses.append(report.loss)
        if result.diverged:
            break
        if not losses:
            break
        if cfg.recalibrate_bn:
            recalibrate_bn(model, train_set, cfg.batch_size)
        score = float(monitor(model))
        rec = EpochRecord(epoch, float(np.mean(losses)), score, cfg.lr, time.perf_counter() - t0)
        result.history.append(rec)
        if log_stream is not None:
            print(rec.tsv(), file=log_stream, flush=True)
        if score > result.best_dsc + cfg.min_delta:
            result.best_dsc, result.best_epoch = score, epoch
            result.best_state = model.state_dict()
            stale = 0
            if checkpoint_path is not None:
                save(model, checkpoint_path)
        else:
            stale += 1
            if stale >= cfg.patience:
                break
        if cfg.max_steps is not None and result.steps >= cfg.max_steps:
            break

    if result.best_state is not None:
        model.load_state_dict(result.best_state)
    elif checkpoint_path is not None:
        save(model, checkpoint_path)
    return result


def evaluate(model: Model, dataset, threshold: float = 0.5):
    """(dataset-mean MetricsReport, per-image reports) in inference mode."""
    if not dataset:
        raise ValueError("cannot evaluate an empty dataset")
    probs = predict_probs(model, dataset)
    reports = [metrics.evaluate_pair(p, s.mask[0], threshold) for p, s in zip(probs, dataset)]
    return metrics.mean_report(reports), reports


def holdout_last(samples, fraction: float = 0.1):
    """Split off the last ``fraction`` (by source path order) as validation; at least one sample."""
    ordered = sorted(samples, key=lambda s: s.source_path)
    k = max(1, int(round(len(ordered) * fraction))) if len(ordered) > 1 else 0
    return ordered[:len(ordered) - k], ordered[len(ordered) - k:]
