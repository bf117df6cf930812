"""Image/mask loading, dataset splits, corner patching and error overlays."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import make_rng

log = logging.getLogger(__name__)

# overlay palette
GREEN = (0, 255, 0)      # true positive
BLACK = (0, 0, 0)        # true negative
RED = (255, 0, 0)        # false positive
BLUE = (0, 0, 255)       # false negative

# (train, val, test) counts for the fixed-split datasets
FIXED_SPLITS = {
    "DRIVE": (40, (20, 0, 20)),
    "ISIC2016": (1279, (900, 0, 379)),
    "ISIC2017": (2750, (2000, 150, 600)),
    "MC": (138, (100, 0, 38)),
    "MONUSEG": (44, (30, 0, 14)),
    "MONUSEG_PATCHES": (176, (120, 0, 56)),
}


class DataError(ValueError):
    pass


@dataclass
class SegSample:
    image: np.ndarray            # (C, H, W) float32 in [0, 1]
    mask: np.ndarray             # (1, H, W) uint8 in {0, 1}
    source_path: str = ""
    split: str = "train"

    def __post_init__(self):
        if self.image.shape[1:] != self.mask.shape[1:]:
            raise DataError(f"image {self.image.shape} and mask {self.mask.shape} extents differ "
                            f"({self.source_path})")


@dataclass
class ManifestEntry:
    image: Path
    mask: Path | None
    split: str = "train"


@dataclass
class DatasetManifest:
    name: str
    entries: list = field(default_factory=list)
    resize_to: tuple = (256, 256)


# ---------------------------------------------------------------------------
# reading
# ---------------------------------------------------------------------------

def _read_array(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I;16L", "I;16N"):
                arr = np.asarray(im, dtype=np.uint16)
            elif im.mode in ("I", "F", "L", "RGB"):
                arr = np.asarray(im)
            elif im.mode in ("1", "P", "LA", "RGBA", "CMYK", "YCbCr", "LAB", "HSV"):
                arr = np.asarray(im.convert("RGB" if im.mode not in ("1", "LA") else "L"))
            else:
                arr = np.asarray(im.convert("RGB"))
    except DataError:
        raise
    except Exception as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return arr


def _unit_scale(arr: np.ndarray) -> np.ndarray:
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    if arr.dtype == np.uint16:
        return arr.astype(np.float32) / 65535.0
    if arr.dtype == np.bool_:
        return arr.astype(np.float32)
    arr = arr.astype(np.float32)
    top = arr.max()
    if top > 1.0:
        # 32-bit integer containers: scale by the largest representable 16-bit value
        arr = arr / (65535.0 if top <= 65535 else top)
    return arr


def _resize_plane(plane: np.ndarray, size: tuple, resample) -> np.ndarray:
    h, w = size
    if plane.shape == (h, w):
        return plane
    im = Image.fromarray(plane.astype(np.float32), mode="F")
    return np.asarray(im.resize((w, h), resample=resample), dtype=np.float32)


def load_image(path, resize_to=None) -> np.ndarray:
    """(C, H, W) float32 in [0, 1]; grayscale stays single-channel."""
    arr = _unit_scale(_read_array(path))
    planes = [arr] if arr.ndim == 2 else [arr[..., c] for c in range(min(arr.shape[2], 3))]
    if resize_to is not None:
        planes = [_resize_plane(p, tuple(resize_to), Image.BILINEAR) for p in planes]
    return np.clip(np.stack(planes), 0.0, 1.0).astype(np.float32)


def match_channels(image: np.ndarray, channels: int) -> np.ndarray:
    """Replicate a grayscale plane to RGB, or average RGB down to one plane."""
    c = image.shape[0]
    if c == channels:
        return image
    if c == 1 and channels == 3:
        return np.repeat(image, 3, axis=0)
    if channels == 1:
        return image.mean(axis=0, keepdims=True).astype(image.dtype)
    raise DataError(f"cannot map {c} image channels to {channels}")


def load_mask(path, resize_to=None) -> np.ndarray:
    """(1, H, W) uint8 in {0, 1}: nearest resize, then threshold at half the maximum."""
    arr = _read_array(path)
    if arr.ndim == 3:
        arr = arr.max(axis=2)
    arr = arr.astype(np.float32)
    if resize_to is not None:
        arr = _resize_plane(arr, tuple(resize_to), Image.NEAREST)
    top = arr.max()
    if top <= 0:
        return np.zeros((1,) + arr.shape, np.uint8)
    return (arr >= 0.5 * top).astype(np.uint8)[None]


def image_extent(path) -> tuple:
    try:
        with Image.open(path) as im:
            return im.size[1], im.size[0]
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    except Exception as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def load_sample(image_path, mask_path, resize_to=None, split: str = "train") -> SegSample:
    ih = image_extent(image_path)
    mh = image_extent(mask_path)
    if ih != mh:
        raise DataError(f"image {image_path} is {ih[0]}x{ih[1]} but mask {mask_path} is {mh[0]}x{mh[1]}")
    return SegSample(load_image(image_path, resize_to), load_mask(mask_path, resize_to),
                     str(image_path), split)


# ---------------------------------------------------------------------------
# manifests and splits
# ---------------------------------------------------------------------------

def read_manifest(path, name: str | None = None, resize_to=(256, 256)) -> DatasetManifest:
    """Tab-separated ``image<TAB>mask<TAB>split`` lines; relative paths resolve
    against the manifest's directory. Blank lines and ``#`` comments are skipped."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    root = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) < 1 or len(cols) > 3:
            raise DataError(f"{path}:{lineno}: expected image<TAB>mask<TAB>split")
        img = root / cols[0]
        mask = root / cols[1] if len(cols) > 1 and cols[1] else None
        split = cols[2].strip() if len(cols) > 2 and cols[2].strip() else "train"
        if split not in ("train", "val", "test"):
            raise DataError(f"{path}:{lineno}: unknown split {split!r}")
        entries.append(ManifestEntry(img, mask, split))
    return DatasetManifest(name or path.stem, entries, tuple(resize_to))


def write_manifest(path, entries) -> None:
    path = Path(path)
    lines = []
    for e in entries:
        lines.append("\t".join([str(e.image), str(e.mask) if e.mask else "", e.split]))
    path.write_text("\n".join(lines) + "\n")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_split(manifest: DatasetManifest, dataset_name: str | None = None, seed: int = 7):
    """(train, val, test) entry lists under a dataset's published convention.

    Without a recognised name the manifest's own split column is used.
    Entries are ordered by image filename before any positional split.
    """
    entries = sorted(manifest.entries, key=lambda e: str(e.image))
    n = len(entries)
    key = (dataset_name or "").upper().replace("-", "").replace(" ", "").replace("_", "")
    key = {"MONUSEGPATCHES": "MONUSEG_PATCHES", "CVCCLINICDB": "CVC"}.get(key, key)
    if key == "MONUSEG" and n == 176:
        key = "MONUSEG_PATCHES"

    if key in FIXED_SPLITS:
        total, counts = FIXED_SPLITS[key]
        if n != total:
            log.warning("%s expects %d entries, found %d; splitting proportionally", dataset_name, total, n)
            tr = _round_half_up(n * counts[0] / total)
            va = min(n - tr, _round_half_up(n * counts[1] / total))
            counts = (tr, va, n - tr - va)
        tr, va, _ = counts
        return entries[:tr], entries[tr:tr + va], entries[tr + va:]
    if key in ("CHASE", "CHASEDB1"):
        if n != 28:
            log.warning("CHASE expects 28 entries, found %d", n)
        tr = _round_half_up(0.7 * n)
        return entries[:tr], [], entries[tr:]
    if key == "CVC":
        if n != 612:
            log.warning("CVC-ClinicDB expects 612 entries, found %d", n)
        order = make_rng(seed).permutation(n)
        va = te = int(math.floor(0.1 * n))
        tr = n - va - te
        picked = [entries[i] for i in order]
        return picked[:tr], picked[tr:tr + va], picked[tr + va:]
    if dataset_name:
        log.warning("no split convention for %r; using the manifest split column", dataset_name)
    return ([e for e in entries if e.split == "train"],
            [e for e in entries if e.split == "val"],
            [e for e in entries if e.split == "test"])


def load_entries(entries, resize_to, split: str | None = None) -> list:
    out = []
    for e in entries:
        if e.mask is None:
            raise DataError(f"entry {e.image} has no mask")
        out.append(load_sample(e.image, e.mask, resize_to, split or e.split))
    return out


# ---------------------------------------------------------------------------
# patching and rendering
# ---------------------------------------------------------------------------

def corner_offsets(h: int, w: int, size: int = 512) -> list:
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than patch size {size}")
    return [(0, 0), (0, w - size), (h - size, 0), (h - size, w - size)]


def corner_patches(image: np.ndarray, size: int = 512) -> list:
    """Four size x size crops anchored at the corners: TL, TR, BL, BR.

    Works on (H, W) or channel-first (C, H, W) arrays.
    """
    h, w = image.shape[-2:]
    return [image[..., y:y + size, x:x + size].copy() for y, x in corner_offsets(h, w, size)]


def render_overlay(pred_binary, ref_binary) -> np.ndarray:
    """(H, W, 3) uint8: TP green, TN black, FP red, FN blue."""
    p = np.asarray(pred_binary).astype(bool)
    r = np.asarray(ref_binary).astype(bool)
    if p.shape != r.shape:
        raise ValueError(f"prediction shape {p.shape} != reference shape {r.shape}")
    out = np.zeros(p.shape + (3,), np.uint8)
    out[p & r] = GREEN
    out[p & ~r] = RED
    out[~p & r] = BLUE
    return out


def decode_overlay(rgb: np.ndarray) -> tuple:
    """Invert ``render_overlay``: (pred, ref) binary maps from the palette colours."""
    rgb = np.asarray(rgb)
    tp = np.all(rgb == GREEN, axis=-1)
    fp = np.all(rgb == RED, axis=-1)
    fn = np.all(rgb == BLUE, axis=-1)
    tn = np.all(rgb == BLACK, axis=-1)
    if not (tp | fp | fn | tn).all():
        raise ValueError("overlay contains colours outside the four-colour palette")
    return (tp | fp).astype(np.uint8), (tp | fn).astype(np.uint8)


def save_png(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.ndim == 3 and arr.shape[0] in (1, 3) and arr.shape[-1] not in (1, 3):
        arr = np.moveaxis(arr, 0, -1)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr.astype(np.uint8)).save(path, format="PNG")


def save_mask_png(path, mask: np.ndarray) -> None:
    save_png(path, (np.asarray(mask).reshape(np.asarray(mask).shape[-2:]) > 0).astype(np.uint8) * 255)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def disk_images(n: int, size: int = 64, seed: int = 0, channels: int = 3) -> list:
    """``n`` noisy images of one bright disk each, with exact disk masks."""
    rng = make_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    out = []
    for i in range(n):
        r = rng.uniform(0.15, 0.3) * size
        cy, cx = rng.uniform(r + 2, size - r - 2, size=2)
        mask = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.uint8)
        base = 0.25 + 0.5 * mask + rng.normal(0, 0.05, size=(channels, size, size))
        img = np.clip(base, 0, 1).astype(np.float32)
        out.append(SegSample(img, mask[None], f"disk{i}", "train"))
    return out


def write_disk_dataset(root, n: int = 4, size: int = 64, seed: int = 0) -> Path:
    """Write PNG images/masks plus a manifest; returns the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(disk_images(n, size, seed)):
        img_p = root / f"img{i:03d}.png"
        mask_p = root / f"img{i:03d}_mask.png"
        save_png(img_p, np.round(s.image * 255))
        save_mask_png(mask_p, s.mask)
        entries.append(ManifestEntry(Path(img_p.name), Path(mask_p.name), "train"))
    manifest = root / "manifest.tsv"
    write_manifest(manifest, entries)
    return manifest
