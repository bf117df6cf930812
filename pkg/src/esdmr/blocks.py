"""Composite units: expand-squeeze block, dual multiscale residual block,
encoder/decoder stages and the input/output blocks.

Every ``*Params`` dataclass is built by a ``make_*`` function that draws
He-normal kernels from a shared generator, so construction order fixes the
initial weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .ops import BatchNormState, ConvParams
from .tensor import Tensor, add, concat_channels

ES_SCALES = (3, 5, 7)


def he_conv(rng, c_out: int, c_in: int, k: int, *, groups: int = 1, padding: int | None = None,
            stride: int = 1, bias: bool = False, dtype=np.float32) -> ConvParams:
    cg = c_in // groups
    std = np.sqrt(2.0 / (cg * k * k))
    kernel = Tensor(rng.normal(0.0, std, size=(c_out, cg, k, k)).astype(dtype), requires_grad=True)
    b = Tensor(np.zeros(c_out, dtype), requires_grad=True) if bias else None
    return ConvParams(kernel, b, stride, (k - 1) // 2 if padding is None else padding, groups)


# ---------------------------------------------------------------------------
# expand-squeeze
# ---------------------------------------------------------------------------

@dataclass
class EsBlockParams:
    scale: int
    dw: ConvParams          # depthwise scale x scale
    expand: ConvParams      # pointwise half of the separable conv
    squeeze: ConvParams     # 1x1 bottleneck
    bn: BatchNormState


def make_es_block(rng, c_in: int, c_out: int, scale: int, expansion: int = 2,
                  dtype=np.float32) -> EsBlockParams:
    if scale not in ES_SCALES:
        raise ValueError(f"ES scale must be one of {ES_SCALES}, got {scale}")
    wide = c_in * expansion
    return EsBlockParams(
        scale=scale,
        dw=he_conv(rng, c_in, c_in, scale, groups=c_in, dtype=dtype),
        expand=he_conv(rng, wide, c_in, 1, dtype=dtype),
        squeeze=he_conv(rng, c_out, wide, 1, dtype=dtype),
        bn=BatchNormState.identity(c_out, dtype),
    )


def es_block(x: Tensor, p: EsBlockParams) -> Tensor:
    """bn(squeeze(separable(relu(x)))), pre-activation order."""
    if x.shape[1] != p.dw.in_channels:
        raise ValueError(f"ES block expects {p.dw.in_channels} channels, got {x.shape[1]}")
    h = ops.relu(x)
    h = ops.depthwise_separable_conv2d(h, p.dw, p.expand)
    h = ops.pointwise_conv2d(h, p.squeeze)
    return ops.batchnorm2d(h, p.bn)


# ---------------------------------------------------------------------------
# dual multiscale residual
# ---------------------------------------------------------------------------

@dataclass
class DmrBlockParams:
    f3_1: ConvParams
    f5_1: ConvParams
    f3_2: ConvParams
    f5_2: ConvParams
    f1_3: ConvParams
    f1_2: ConvParams        # shortcut
    bn1: BatchNormState
    bn2: BatchNormState
    bn3: BatchNormState
    bn4: BatchNormState
    bn_short: BatchNormState


def make_dmr_block(rng, width: int, dtype=np.float32) -> DmrBlockParams:
    if width % 2:
        raise ValueError(f"DMR width must be even, got {width}")
    b = width // 2
    return DmrBlockParams(
        f3_1=he_conv(rng, b, width, 3, dtype=dtype),
        f5_1=he_conv(rng, b, width, 5, dtype=dtype),
        f3_2=he_conv(rng, b, 2 * b, 3, dtype=dtype),
        f5_2=he_conv(rng, b, 2 * b, 5, dtype=dtype),
        f1_3=he_conv(rng, width, 2 * b, 1, bias=True, dtype=dtype),
        f1_2=he_conv(rng, width, width, 1, dtype=dtype),
        bn1=BatchNormState.identity(b, dtype),
        bn2=BatchNormState.identity(b, dtype),
        bn3=BatchNormState.identity(b, dtype),
        bn4=BatchNormState.identity(b, dtype),
        bn_short=BatchNormState.identity(width, dtype),
    )


def dmr_block(f_in: Tensor, p: DmrBlockParams) -> Tensor:
    if f_in.shape[1] != p.f3_1.in_channels:
        raise ValueError(f"DMR block expects {p.f3_1.in_channels} channels, got {f_in.shape[1]}")
    t1 = ops.batchnorm2d(ops.conv2d(f_in, p.f3_1), p.bn1)
    t2 = ops.batchnorm2d(ops.conv2d(f_in, p.f5_1), p.bn2)
    t3 = ops.relu(ops.batchnorm2d(ops.conv2d(concat_channels(t1, t2), p.f3_2), p.bn3))
    t4 = ops.relu(ops.batchnorm2d(ops.conv2d(concat_channels(t2, t1), p.f5_2), p.bn4))
    t_prime = ops.pointwise_conv2d(concat_channels(t4, t3), p.f1_3)
    t5 = ops.relu(ops.batchnorm2d(ops.pointwise_conv2d(f_in, p.f1_2), p.bn_short))
    return add(t_prime, t5)


# ---------------------------------------------------------------------------
# multi-branch stages
# ---------------------------------------------------------------------------

@dataclass
class EsGroup:
    branches: list          # three EsBlockParams at scales 3, 5, 7
    fuse: ConvParams        # 3*width -> width


@dataclass
class StageParams:
    resample: str                            # "downsample" | "upsample"
    groups: list = field(default_factory=list)
    merge: ConvParams | None = None          # decoder only: concat(up, skip) -> width
    pool_stride: int = 2

    @property
    def repeat(self) -> int:
        return len(self.groups)

    @property
    def width(self) -> int:
        return self.groups[-1].fuse.out_channels


def make_es_group(rng, c_in: int, width: int, expansion: int, dtype=np.float32) -> EsGroup:
    branches = [make_es_block(rng, c_in, width, s, expansion, dtype) for s in ES_SCALES]
    return EsGroup(branches, he_conv(rng, width, width * len(ES_SCALES), 1, bias=True, dtype=dtype))


def es_group(x: Tensor, g: EsGroup) -> Tensor:
    outs = [es_block(x, b) for b in g.branches]
    cat = outs[0]
    for o in outs[1:]:
        cat = concat_channels(cat, o)
    return ops.pointwise_conv2d(cat, g.fuse)


def make_encoder_stage(rng, c_in: int, width: int, repeat: int = 2, expansion: int = 2,
                       pool_stride: int = 2, dtype=np.float32) -> StageParams:
    groups = [make_es_group(rng, c_in if i == 0 else width, width, expansion, dtype)
              for i in range(repeat)]
    return StageParams("downsample", groups, None, pool_stride)


def make_decoder_stage(rng, c_in: int, skip_width: int, repeat: int = 2, expansion: int = 2,
                       dtype=np.float32) -> StageParams:
    merge = he_conv(rng, skip_width, c_in + skip_width, 1, bias=True, dtype=dtype)
    groups = [make_es_group(rng, skip_width, skip_width, expansion, dtype) for _ in range(repeat)]
    return StageParams("upsample", groups, merge)


def encoder_stage(x: Tensor, p: StageParams) -> tuple[Tensor, Tensor]:
    """Returns (pooled features, pre-pool skip)."""
    if p.resample != "downsample":
        raise ValueError("encoder_stage needs a downsampling stage")
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise ValueError(f"encoder input extents must be even, got {h}x{w}")
    skip = x
    for g in p.groups:
        skip = es_group(skip, g)
    return ops.avgpool2d(skip, 3, p.pool_stride, 1), skip


def decoder_stage(x: Tensor, skip_processed: Tensor, p: StageParams) -> Tensor:
    if p.resample != "upsample":
        raise ValueError("decoder_stage needs an upsampling stage")
    up = ops.bilinear_upsample2x(x)
    if up.shape[2:] != skip_processed.shape[2:]:
        raise ValueError(f"upsampled {up.shape[2:]} does not match skip {skip_processed.shape[2:]}")
    h = ops.pointwise_conv2d(concat_channels(up, skip_processed), p.merge)
    for g in p.groups:
        h = es_group(h, g)
    return h


# ---------------------------------------------------------------------------
# input / output
# ---------------------------------------------------------------------------

@dataclass
class InputBlockParams:
    conv: ConvParams
    bn: BatchNormState


@dataclass
class OutputBlockParams:
    conv: ConvParams
    bn: BatchNormState


def make_input_block(rng, c_in: int, width: int, dtype=np.float32) -> InputBlockParams:
    if c_in not in (1, 3):
        raise ValueError(f"input block accepts 1 or 3 channels, got {c_in}")
    return InputBlockParams(he_conv(rng, width, c_in, 3, dtype=dtype), BatchNormState.identity(width, dtype))


def make_output_block(rng, c_in: int, num_classes: int = 2, dtype=np.float32) -> OutputBlockParams:
    return OutputBlockParams(he_conv(rng, num_classes, c_in, 1, dtype=dtype),
                             BatchNormState.identity(num_classes, dtype))


def input_block(image: Tensor, p: InputBlockParams) -> Tensor:
    if image.shape[1] != p.conv.in_channels:
        raise ValueError(f"input block expects {p.conv.in_channels} channels, got {image.shape[1]}")
    return ops.relu(ops.batchnorm2d(ops.conv2d(image, p.conv), p.bn))


def output_block(features: Tensor, p: OutputBlockParams) -> Tensor:
    """Class probabilities; channel 1 is foreground."""
    return ops.softmax_channels(ops.batchnorm2d(ops.conv2d(features, p.conv), p.bn))


def predict_mask(probs) -> np.ndarray:
    """Foreground where its probability strictly wins; exact ties go to background."""
    data = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return (data[:, 1] > data[:, 0]).astype(np.uint8)
