"""Build the network, count its parameters, and run a forward pass.

Run: python3 demos/02_blocks_and_model.py
"""
import numpy as np

from esdmr import blocks
from esdmr.model import ModelConfig, build, layer_count, param_breakdown, param_count
from esdmr.tensor import Tensor, make_rng

# One ES block: relu, depthwise scale x scale, expand 1x1, squeeze 1x1, bn.
rng = make_rng(0)
es = blocks.make_es_block(rng, c_in=8, c_out=8, scale=5)
x = Tensor(rng.normal(size=(1, 8, 16, 16)).astype(np.float32))
print("ES block:", x.shape, "->", blocks.es_block(x, es).shape, "params", param_count(es))

# One DMR block keeps channels and extents.
dmr = blocks.make_dmr_block(rng, 8)
print("DMR block:", x.shape, "->", blocks.dmr_block(x, dmr).shape, "params", param_count(dmr))

# Full model at the default configuration.
m = build()
print(f"default model: {param_count(m):,} parameters, {layer_count(m)} layers")
for part, n in param_breakdown(m).items():
    print(f"  {part:10s} {n:>8,}")

# The ablation drops the five DMR blocks and nothing else.
off = build(ModelConfig(use_dmr=False))
print(f"without DMR: {param_count(off):,} parameters ({param_count(m) - param_count(off):,} fewer)")

# Fully convolutional: any extent divisible by 16 works.
small = build(ModelConfig(stem_width=8, stage_widths=(8, 8, 16, 16), repeat=1))
for h, w in [(64, 64), (96, 48)]:
    probs = small(np.zeros((1, 3, h, w), np.float32))
    print(f"input {h}x{w} -> probabilities {probs.shape}, channel sums {probs.data.sum(axis=1).mean():.3f}")
