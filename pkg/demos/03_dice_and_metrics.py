"""Soft Dice loss, its gradient, and the evaluation metrics on small maps.

Run: python3 demos/03_dice_and_metrics.py
"""
import numpy as np

from esdmr import metrics
from esdmr.dice import dice_loss, dice_loss_grad, dsc
from esdmr.tensor import Tape, Tensor, make_rng

print("dsc([1, .5, 0], [1, 1, 0]) =", round(dsc([1, 0.5, 0], [1, 1, 0]), 4))
print("both empty counts as agreement:", dsc(np.zeros(4), np.zeros(4)))

# Loss over a batch is the sum of squared per-image misses. The closed-form
# gradient and the tape gradient agree.
rng = make_rng(0)
p = rng.uniform(size=(2, 8, 8))
g = (rng.random((2, 8, 8)) < 0.5).astype(float)
t = Tensor(p, requires_grad=True, dtype=np.float64)
with Tape() as tape:
    rep = dice_loss(t, g)
(auto,) = tape.backward(rep.value, wrt=[t])
print(f"loss {rep.loss:.4f}, per-image dsc {np.round(rep.per_image_dsc, 4)}")
print("closed form == autodiff:", np.allclose(dice_loss_grad(p, g), auto, atol=1e-10))

# Metrics on a prediction that is the reference with some noise.
ref = np.zeros((32, 32), np.uint8)
ref[8:24, 10:22] = 1
prob = np.clip(ref * 0.45 + rng.uniform(0, 0.6, ref.shape), 0, 1)
report = metrics.evaluate_pair(prob, ref)
for name, value in zip(report.COLUMNS, report.values()):
    print(f"  {name:10s} {value:.4f}")
