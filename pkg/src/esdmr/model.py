"""Full encoder-decoder assembly, parameter/layer accounting and checkpoints.

Checkpoint layout (all integers little-endian)::

    b"ESDM" | u32 version | 32-byte config digest | u32 tensor count
    per tensor: u32 name length | utf-8 name | u32 rank | u32 dims... | f32 data
"""
from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import blocks
from .ops import BatchNormState, ConvParams
from .tensor import Tensor, concat_channels, make_rng

MAGIC = b"ESDM"
FORMAT_VERSION = 1

# elementary ops counted as layers
LAYER_OPS = ("conv", "bn", "relu", "pool", "upsample", "softmax")


@dataclass
class ModelConfig:
    input_channels: int = 3
    stem_width: int = 16
    stage_widths: tuple = (16, 32, 48, 56)
    repeat: int = 2
    expansion: int = 2
    use_dmr: bool = True
    num_classes: int = 2
    input_size: tuple = (256, 256)
    pool_stride: int = 2
    seed: int = 0

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        self.input_size = tuple(int(s) for s in self.input_size)

    def validate(self):
        if self.input_channels not in (1, 3):
            raise ValueError(f"input_channels must be 1 or 3, got {self.input_channels}")
        if len(self.stage_widths) != 4:
            raise ValueError(f"stage_widths needs 4 entries, got {len(self.stage_widths)}")
        if any(w < 2 or w % 2 for w in self.stage_widths):
            raise ValueError(f"stage_widths must be positive and even, got {self.stage_widths}")
        if list(self.stage_widths) != sorted(self.stage_widths):
            raise ValueError(f"stage_widths must be non-decreasing, got {self.stage_widths}")
        if self.stem_width < 2 or self.stem_width % 2:
            raise ValueError(f"stem_width must be positive and even, got {self.stem_width}")
        if self.repeat < 1:
            raise ValueError(f"repeat must be >= 1, got {self.repeat}")
        if self.expansion < 1:
            raise ValueError(f"expansion must be >= 1, got {self.expansion}")
        if self.num_classes != 2:
            raise ValueError(f"num_classes must be 2, got {self.num_classes}")
        if len(self.input_size) != 2 or any(s < 32 or s % 16 for s in self.input_size):
            raise ValueError(f"input_size must be two extents >= 32 divisible by 16, got {self.input_size}")
        if self.pool_stride != 2:
            raise ValueError("pool_stride must be 2: the decoder upsamples by exactly 2")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> bytes:
        """SHA-256 over the fields that shape the parameter set."""
        arch = {k: v for k, v in self.to_dict().items() if k not in ("seed", "input_size")}
        return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).digest()


@dataclass
class Model:
    config: ModelConfig
    input: blocks.InputBlockParams
    encoders: list
    decoders: list                 # decoders[i] consumes the skip of encoders[i]
    dmr: list                      # five blocks (four skips + stem), empty when use_dmr is off
    output: blocks.OutputBlockParams
    dtype: type = np.float32

    # -- parameter access ------------------------------------------------
    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        for name in ("input", "encoders", "decoders", "dmr", "output"):
            yield from _walk(getattr(self, name), name)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return ((n, t) for n, t in self.named_tensors() if t.requires_grad)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def batchnorms(self) -> list[BatchNormState]:
        found: list = []
        for name in ("input", "encoders", "decoders", "dmr", "output"):
            _collect_bn(getattr(self, name), found)
        return found

    def set_mode(self, mode: str, track_stats: bool = True):
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        for bn in self.batchnorms():
            bn.mode = mode
            bn.track = track_stats

    def state_dict(self) -> dict:
        return {n: t.data.copy() for n, t in self.named_tensors()}

    def load_state_dict(self, state: dict):
        for n, t in self.named_tensors():
            t.data[...] = state[n]

    def forward(self, image, mode: str = "infer", track_stats: bool = True) -> Tensor:
        return forward(self, image, mode, track_stats)

    __call__ = forward


def _walk(obj, prefix: str):
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif isinstance(obj, list):
        for i, item in enumerate(obj):
            yield from _walk(item, f"{prefix}.{i}")
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if v is not None:
                yield from _walk(v, f"{prefix}.{f.name}")


def _collect_bn(obj, found: list):
    if isinstance(obj, BatchNormState):
        found.append(obj)
    elif isinstance(obj, list):
        for item in obj:
            _collect_bn(item, found)
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, (ConvParams, Tensor)):
        for f in dataclasses.fields(obj):
            _collect_bn(getattr(obj, f.name), found)


def build(config: ModelConfig | None = None, dtype=np.float32) -> Model:
    """Deterministic construction from ``config.seed`` (He-normal kernels, identity batch norms)."""
    cfg = (config or ModelConfig()).validate()
    rng = make_rng(cfg.seed)
    w = cfg.stage_widths
    inp = blocks.make_input_block(rng, cfg.input_channels, cfg.stem_width, dtype)
    encoders = []
    c = cfg.stem_width
    for width in w:
        encoders.append(blocks.make_encoder_stage(rng, c, width, cfg.repeat, cfg.expansion,
                                                  cfg.pool_stride, dtype))
        c = width
    decoders = [None] * 4
    for i in reversed(range(4)):
        c_in = w[3] if i == 3 else w[i + 1]
        decoders[i] = blocks.make_decoder_stage(rng, c_in, w[i], cfg.repeat, cfg.expansion, dtype)
    out = blocks.make_output_block(rng, w[0] + cfg.stem_width, cfg.num_classes, dtype)
    # DMR weights come last so the ablation shares every other initial weight
    dmr = [blocks.make_dmr_block(rng, width, dtype) for width in (*w, cfg.stem_width)] if cfg.use_dmr else []
    return Model(cfg, inp, encoders, decoders, dmr, out, dtype)


def forward(m: Model, image, mode: str = "infer", track_stats: bool = True) -> Tensor:
    """(N, C, H, W) image -> (N, 2, H, W) class probabilities."""
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=m.dtype))
    if x.ndim != 4:
        raise ValueError(f"expected an (N, C, H, W) image batch, got shape {x.shape}")
    h, w = x.shape[2:]
    if h % 16 or w % 16:
        raise ValueError(f"image extents must be divisible by 16, got {h}x{w}")
    m.set_mode(mode, track_stats)
    stem = blocks.input_block(x, m.input)
    feats, skips = stem, []
    for enc in m.encoders:
        feats, skip = blocks.encoder_stage(feats, enc)
        skips.append(skip)
    hcur = feats
    for i in reversed(range(4)):
        s = blocks.dmr_block(skips[i], m.dmr[i]) if m.dmr else skips[i]
        hcur = blocks.decoder_stage(hcur, s, m.decoders[i])
    top = blocks.dmr_block(stem, m.dmr[4]) if m.dmr else stem
    return blocks.output_block(concat_channels(hcur, top), m.output)


# ---------------------------------------------------------------------------
# accounting
# ---------------------------------------------------------------------------

def param_count(obj) -> int:
    """Trainable element count of a model or any parameter container."""
    if isinstance(obj, Model):
        return sum(t.size for _, t in obj.named_parameters())
    return sum(t.size for _, t in _walk(obj, "") if t.requires_grad)


def param_breakdown(m: Model) -> dict:
    parts = {"input": m.input, "output": m.output}
    parts.update({f"encoder{i + 1}": e for i, e in enumerate(m.encoders)})
    parts.update({f"decoder{i + 1}": d for i, d in enumerate(m.decoders)})
    parts.update({f"dmr{i + 1}": d for i, d in enumerate(m.dmr)})
    return {k: param_count(v) for k, v in parts.items()}


def layer_count(m: Model) -> int:
    """Elementary ops (conv, bn, relu, pool, upsample, softmax) in one forward pass."""
    es = 5                              # relu, depthwise, expand, squeeze, bn
    group = 3 * es + 1                  # three branches + fuse
    r = m.config.repeat
    total = 3                           # input block: conv, bn, relu
    total += 4 * (r * group + 1)        # encoders + pooling
    total += 4 * (1 + 1 + r * group)    # decoders: upsample, merge, groups
    total += len(m.dmr) * 14            # 6 conv, 5 bn, 3 relu
    total += 3                          # output block: conv, bn, softmax
    return total


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

class CheckpointError(ValueError):
    def __init__(self, message: str, tensor: str | None = None, names: list | None = None):
        super().__init__(message)
        self.tensor = tensor
        self.names = names or []


def _serialize(m: Model) -> bytes:
    buf = io.BytesIO()
    tensors = list(m.named_tensors())
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(m.config.digest())
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return buf.getvalue()


def save(m: Model, path) -> None:
    Path(path).write_bytes(_serialize(m))


def read_checkpoint(path) -> tuple[bytes, dict]:
    """Parse a checkpoint into (config digest, {name: float32 array})."""
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str, tensor: str | None = None) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            where = f" in tensor {tensor!r}" if tensor else ""
            raise CheckpointError(f"truncated checkpoint reading {what}{where}", tensor)
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointError("not an ESDM checkpoint (bad magic bytes)")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
    digest = take(32, "config digest")
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors: dict = {}
    prev = None
    for k in range(count):
        label = f"#{k} (after {prev!r})" if prev else f"#{k}"
        (nlen,) = struct.unpack("<I", take(4, "name length", label))
        if nlen > len(data) - pos:
            raise CheckpointError(f"corrupt name length {nlen} for tensor {label}", label)
        try:
            name = take(nlen, "name", label).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"undecodable name for tensor {label}", label) from None
        (rank,) = struct.unpack("<I", take(4, "rank", name))
        if rank > 8:
            raise CheckpointError(f"corrupt rank {rank} for tensor {name!r}", name)
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims", name))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        if n * 4 > len(data) - pos:
            raise CheckpointError(f"tensor {name!r} declares shape {dims} but the file is too short", name)
        arr = np.frombuffer(take(4 * n, "data", name), dtype="<f4").reshape(dims)
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r}", name)
        tensors[name] = arr
        prev = name
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after the last tensor {prev!r}", prev)
    return digest, tensors


def load(path, config: ModelConfig, dtype=np.float32) -> Model:
    digest, tensors = read_checkpoint(path)
    m = build(config, dtype)
    expected = dict(m.named_tensors())
    missing = [n for n in expected if n not in tensors]
    extra = [n for n in tensors if n not in expected]
    if missing or extra:
        msg = []
        if missing:
            msg.append(f"missing tensors: {', '.join(missing)}")
        if extra:
            msg.append(f"unexpected tensors: {', '.join(extra)}")
        raise CheckpointError("checkpoint does not match config; " + "; ".join(msg),
                              (missing or extra)[0], missing + extra)
    for name, t in expected.items():
        if tensors[name].shape != t.shape:
            raise CheckpointError(f"tensor {name!r} has shape {tensors[name].shape}, config expects {t.shape}", name)
    if digest != config.digest():
        raise CheckpointError("config digest mismatch: checkpoint was written for a different architecture")
    for name, t in expected.items():
        t.data[...] = tensors[name]
    return m
