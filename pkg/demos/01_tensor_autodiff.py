"""Reverse-mode autodiff on a tape, checked against central differences.

Run: python3 demos/01_tensor_autodiff.py
"""
import numpy as np

from esdmr import ops
from esdmr.ops import ConvParams
from esdmr.tensor import Tape, Tensor, grad_check, make_rng, mul, tsum

rng = make_rng(0)

# A scalar function of a small tensor. Every op inside the Tape context is
# recorded; backward walks the record in reverse.
x = Tensor(rng.normal(size=(2, 3)), requires_grad=True, dtype=np.float64)
with Tape() as tape:
    y = tsum(mul(x, x))
(gx,) = tape.backward(y, wrt=[x])
print("d/dx sum(x*x) == 2x:", np.allclose(gx, 2 * x.data))

# The same machinery drives convolution. grad_check perturbs each input
# coordinate and compares the tape gradient with a central difference.
w = ConvParams(Tensor(rng.normal(size=(4, 3, 3, 3)), dtype=np.float64), None, 1, 1, 1)
img = Tensor(rng.normal(size=(1, 3, 6, 6)), dtype=np.float64)
err = grad_check(lambda t: tsum(ops.conv2d(t, w)), img)
print(f"conv2d input gradient, max rel err: {err:.2e}")

# Kernels are tensors too, so the weight gradient checks the same way.
err = grad_check(lambda k: tsum(ops.conv2d(img, ConvParams(k, None, 1, 1, 1))), w.kernel)
print(f"conv2d kernel gradient, max rel err: {err:.2e}")

# Depthwise and pointwise halves compose into a separable convolution.
dw = ConvParams(Tensor(rng.normal(size=(3, 1, 5, 5)), dtype=np.float64), None, 1, 2, 3)
pw = ConvParams(Tensor(rng.normal(size=(8, 3, 1, 1)), dtype=np.float64), None, 1, 0, 1)
sep = ops.depthwise_separable_conv2d(img, dw, pw)
print("separable output shape:", sep.shape)
print("separable params:", dw.param_count() + pw.param_count(),
      "vs dense 5x5:", ConvParams(Tensor(np.zeros((8, 3, 5, 5))), None).param_count())
