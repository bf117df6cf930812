"""Acceptance suite: one test (or small group) per criterion.

Each test carries a ``criterion`` marker; conftest prints a PASS/FAIL line per
criterion at the end of the run.
"""
import math
import time

import numpy as np
import pytest
from PIL import Image

from esdmr import cli, data, gradcheck, metrics as mt, ops
from esdmr.dice import dice_loss, dice_loss_grad
from esdmr.model import CheckpointError, ModelConfig, build, layer_count, load, param_count, save
from esdmr.ops import ConvParams
from esdmr.tensor import Tape, Tensor, make_rng
from esdmr import trainer as T
from oracles import confusion_loops, depthwise_loops, dsc_direct, exact_auc, fd_grad, pointwise_loops, rel_err

F64 = np.float64
crit = pytest.mark.criterion


def conv(kernel, bias=None, padding=0, groups=1):
    return ConvParams(Tensor(kernel, dtype=F64), Tensor(bias, dtype=F64) if bias is not None else None,
                      1, padding, groups)


# 1 --------------------------------------------------------------------------

@crit(1, "parameter budget and layer count")
def test_c1_budget(capsys):
    t0 = time.perf_counter()
    assert cli.main(["info"]) == 0
    elapsed = time.perf_counter() - t0
    out = dict(l.split("\t") for l in capsys.readouterr().out.strip().split("\n"))
    assert 600_000 <= int(out["param_count"]) <= 800_000
    assert int(out["layer_count"]) > 100
    assert elapsed < 1.0
    print(f"param_count={out['param_count']} layer_count={out['layer_count']} {elapsed:.3f}s")


# 2 --------------------------------------------------------------------------

@crit(2, "finite-difference gradient suite, 20 seeds")
def test_c2_gradient_suite():
    t0 = time.perf_counter()
    results = gradcheck.run(seeds=20)
    elapsed = time.perf_counter() - t0
    for r in results:
        print(r.line())
    names = {r.name for r in results}
    for required in ("conv2d", "depthwise_conv2d", "pointwise_conv2d", "separable_conv2d", "batchnorm_train",
                     "batchnorm_infer", "relu", "softmax", "avgpool", "upsample", "es_block", "dmr_block",
                     "end_to_end"):
        assert required in names
    for r in results:
        assert r.seeds >= 20
        assert r.tol <= (1e-3 if r.name.startswith("batchnorm") or r.name == "end_to_end" else 1e-4)
    assert all(r.ok for r in results), [r.line() for r in results if not r.ok]
    assert elapsed < 300


# 3 --------------------------------------------------------------------------

@crit(3, "dice gradient: analytic vs autodiff vs finite differences")
def test_c3_dice_triple():
    t0 = time.perf_counter()
    rng = make_rng(30)
    worst = 0.0
    for _ in range(50):
        p = rng.uniform(0.0, 1.0, size=(1, 8, 8))
        g = (rng.random((1, 8, 8)) < 0.5).astype(F64)
        t = Tensor(p, requires_grad=True, dtype=F64)
        with Tape() as tape:
            r = dice_loss(t, g)
        (auto,) = tape.backward(r.value, wrt=[t])
        ana = dice_loss_grad(p, g)
        fd = fd_grad(lambda v: (1 - dsc_direct(v, g)) ** 2, p)
        worst = max(worst, rel_err(ana, auto), rel_err(ana, fd), rel_err(auto, fd))
    print(f"max pairwise rel err {worst:.2e}")
    assert worst < 1e-5
    assert time.perf_counter() - t0 < 10


# 4 --------------------------------------------------------------------------

@crit(4, "depthwise, pointwise, separable convolution oracles")
def test_c4_conv_oracles():
    rng = make_rng(40)
    for _ in range(100):
        n, c, co = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        h, w = rng.integers(3, 8, size=2)
        k = int(rng.choice([3, 5, 7]))
        x = rng.integers(-4, 5, size=(n, c, h, w)).astype(F64)
        kd = rng.integers(-4, 5, size=(c, k, k)).astype(F64)
        kp = rng.integers(-4, 5, size=(co, c)).astype(F64)
        dw = conv(kd[:, None], padding=(k - 1) // 2, groups=c)
        pw = conv(kp[:, :, None, None])
        xt = Tensor(x, dtype=F64)
        d = ops.depthwise_conv2d(xt, dw).data
        assert np.array_equal(d, depthwise_loops(x, kd))
        assert np.array_equal(ops.pointwise_conv2d(xt, pw).data, pointwise_loops(x, kp))
        sep = ops.depthwise_separable_conv2d(xt, dw, pw).data
        assert np.array_equal(sep, pointwise_loops(depthwise_loops(x, kd), kp))
        # separable equals the composition bit for bit, on non-integer data too
        xf = Tensor(rng.normal(size=x.shape), dtype=F64)
        dwf = conv(rng.normal(size=(c, 1, k, k)), padding=(k - 1) // 2, groups=c)
        pwf = conv(rng.normal(size=(co, c, 1, 1)), rng.normal(size=co))
        a = ops.depthwise_separable_conv2d(xf, dwf, pwf).data
        b = ops.pointwise_conv2d(ops.depthwise_conv2d(xf, dwf), pwf).data
        assert a.tobytes() == b.tobytes()


# 5 --------------------------------------------------------------------------

def enumerated_metrics(p, r):
    tp, tn, fp, fn = confusion_loops(p, r)
    se = tp / (tp + fn) if tp + fn else 1.0
    sp = tn / (tn + fp) if tn + fp else 1.0
    acc = (tp + tn) / (tp + tn + fp + fn)
    f1 = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 1.0
    jac = tp / (tp + fp + fn) if tp + fp + fn else 1.0
    return (tp, tn, fp, fn), (se, sp, acc, f1, jac)


@crit(5, "metric oracles on 200 random 8x8 maps")
def test_c5_metric_oracles():
    rng = make_rng(50)
    auc_gap, fbw_checked = 0.0, 0
    for _ in range(200):
        r = (rng.random((8, 8)) < rng.uniform(0.2, 0.8)).astype(np.uint8)
        prob = rng.random((8, 8))
        p = (prob > 0.5).astype(np.uint8)
        counts, expect = enumerated_metrics(p, r)
        c = mt.confusion(p, r)
        assert (c.tp, c.tn, c.fp, c.fn) == counts
        assert mt.basic_metrics(c) == expect
        assert mt.mae(prob, r) == math.fsum(abs(float(a) - float(b)) for a, b in zip(prob.ravel(), r.ravel())) / 64
        if c.tp > 0:
            assert mt.weighted_fscore(p, r, beta=1.0, omega="uniform") == expect[3]
            fbw_checked += 1
        if 0 < r.sum() < r.size:
            auc_gap = max(auc_gap, abs(mt.auc(prob, r) - exact_auc(prob, r)))
    print(f"fbw==F1 on {fbw_checked} maps with tp>0; max AUC gap {auc_gap:.4f}")
    assert fbw_checked >= 150
    assert auc_gap < 0.01


# 6 --------------------------------------------------------------------------

@crit(6, "DMR ablation wiring")
def test_c6_ablation_params():
    on, off = build(ModelConfig()), build(ModelConfig(use_dmr=False))
    assert param_count(on) - param_count(off) == sum(param_count(d) for d in on.dmr)
    assert layer_count(on) > layer_count(off)


@crit(6, "DMR ablation wiring")
@pytest.mark.parametrize("use_dmr", [True, False])
def test_c6_both_variants_train_one_epoch(use_dmr):
    samples = data.disk_images(4, 32, 0)
    cfg = ModelConfig(stem_width=4, stage_widths=(4, 4, 8, 8), repeat=1, input_size=(32, 32), use_dmr=use_dmr)
    m = build(cfg)
    steps = len(T.make_batches(len(samples), 2))
    res = T.train(m, samples, [], T.TrainConfig(batch_size=2, max_epochs=2, patience=1, max_steps=steps))
    assert not res.diverged and res.steps == steps and len(res.history) == 1
    assert np.isfinite(res.history[0].train_loss)


# 7 --------------------------------------------------------------------------

OVERFIT = ModelConfig(stem_width=8, stage_widths=(8, 8, 16, 16), repeat=1, input_size=(64, 64), seed=0)


@crit(7, "overfit smoke test on four disks")
def test_c7_overfit():
    t0 = time.perf_counter()
    samples = data.disk_images(4, 64, 1)
    m = build(OVERFIT)
    f1s = []

    def monitor(model):
        # inference-mode F1 on the training images; cheaper than the full report
        probs = T.predict_probs(model, samples)
        f1s.append(float(np.mean([mt.basic_metrics(mt.confusion((p > 0.5).astype(np.uint8), s.mask[0]))[3]
                                  for p, s in zip(probs, samples)])))
        return f1s[-1]
    cfg = T.TrainConfig(batch_size=4, max_epochs=200, patience=199, max_steps=200, seed=0)
    res = T.train(m, samples, [], cfg, monitor=monitor)
    elapsed = time.perf_counter() - t0
    losses = res.step_losses
    first = next((i + 1 for i, f in enumerate(f1s) if f >= 0.95), None)
    final = T.evaluate(m, samples)[0].f1
    bad = [t for t in range(50, len(losses)) if losses[t] > losses[t - 20]]
    print(f"steps={res.steps} first F1>=0.95 at step {first} final F1={final:.4f} "
          f"window violations={len(bad)} {elapsed:.1f}s")
    assert res.steps <= 200 and first is not None
    assert final >= 0.95
    assert not bad, [(t, losses[t - 20], losses[t]) for t in bad[:5]]
    assert elapsed < 180


# 8 --------------------------------------------------------------------------

@crit(8, "training protocol defaults and clipping")
def test_c8_protocol():
    c = T.TrainConfig()
    assert (c.lr, c.batch_size, c.clip_norm, c.max_epochs) == (1e-3, 8, 3.0, 15)
    rng = make_rng(80)
    adversarial = [
        [np.full(10, 1e30)],                                   # huge but finite
        [np.array([1e-300, 3.0])],                             # tiny next to threshold
        [np.array([3.0 + 1e-12])],                             # just above threshold
        [np.ones((64, 64)) * 1e3, np.zeros(5)],
        [rng.normal(size=7) * 10 ** k for k in range(-8, 9, 4)],
    ]
    adversarial += [[rng.standard_cauchy(size=rng.integers(1, 50)) * 10 ** rng.uniform(-3, 8)
                     for _ in range(rng.integers(1, 6))] for _ in range(200)]
    for g in adversarial:
        out, _ = T.clip_global_norm(g, 3.0)
        assert T.global_norm(out) <= 3 * (1 + 1e-6)


# 9 --------------------------------------------------------------------------

@crit(9, "checkpoint round trip and corruption diagnostics")
def test_c9_checkpoint(tmp_path):
    cfg = ModelConfig(stem_width=4, stage_widths=(4, 4, 8, 8), repeat=1, input_size=(32, 32))
    m = build(cfg)
    rng = make_rng(90)
    for t in m.parameters():
        t.data += rng.normal(size=t.shape).astype(np.float32)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save(m, p1)
    save(load(p1, cfg), p2)
    assert p1.read_bytes() == p2.read_bytes()
    raw = p1.read_bytes()
    names = [n for n, _ in m.named_tensors()]
    (tmp_path / "t.ckpt").write_bytes(raw[:-7])
    with pytest.raises(CheckpointError) as e:
        load(tmp_path / "t.ckpt", cfg)
    assert e.value.tensor == names[-1] and names[-1] in str(e.value)
    bad = bytearray(raw)
    off = 44 + 4 + len(names[0])
    bad[off:off + 4] = (99).to_bytes(4, "little")          # impossible ndim for the first tensor
    (tmp_path / "n.ckpt").write_bytes(bytes(bad))
    with pytest.raises(CheckpointError) as e:
        load(tmp_path / "n.ckpt", cfg)
    assert e.value.tensor == names[0]
    with pytest.raises(CheckpointError) as e:
        load(p1, ModelConfig(**{**cfg.to_dict(), "use_dmr": False}))
    assert e.value.names and all(n.startswith("dmr.") for n in e.value.names)


# 10 -------------------------------------------------------------------------

@crit(10, "corner patching counts and offsets")
def test_c10_patching():
    img = np.arange(1000 * 1000, dtype=np.float32).reshape(1000, 1000)
    ps = data.corner_patches(img, 512)
    offsets = [(0, 0), (0, 488), (488, 0), (488, 488)]
    assert data.corner_offsets(1000, 1000, 512) == offsets
    assert len(ps) == 4
    for (y, x), p in zip(offsets, ps):
        assert p.shape == (512, 512) and np.array_equal(p, img[y:y + 512, x:x + 512])
    total = sum(len(data.corner_patches(np.zeros((3, 1000, 1000), np.float32), 512)) for _ in range(44))
    assert total == 176


# 11 -------------------------------------------------------------------------

@crit(11, "overlay colour histogram equals confusion counts")
def test_c11_overlay(tmp_path):
    rng = make_rng(110)
    for i in range(50):
        h, w = rng.integers(4, 40, size=2)
        p = (rng.random((h, w)) < rng.random()).astype(np.uint8)
        r = (rng.random((h, w)) < rng.random()).astype(np.uint8)
        path = tmp_path / f"o{i}.png"
        data.save_png(path, data.render_overlay(p, r))
        rgb = np.asarray(Image.open(path).convert("RGB")).reshape(-1, 3)
        colours, counts = np.unique(rgb, axis=0, return_counts=True)
        hist = {tuple(int(v) for v in c): int(k) for c, k in zip(colours, counts)}
        tp, tn, fp, fn = confusion_loops(p, r)
        assert set(hist) <= {data.GREEN, data.BLACK, data.RED, data.BLUE}
        assert (hist.get(data.GREEN, 0), hist.get(data.BLACK, 0), hist.get(data.RED, 0),
                hist.get(data.BLUE, 0)) == (tp, tn, fp, fn)
