"""Manifests, dataset splits, corner patches, and colour overlays.

Run: python3 demos/05_dataset_io.py
"""
import tempfile
from pathlib import Path

import numpy as np

from esdmr import data
from esdmr.data import DatasetManifest, ManifestEntry
from esdmr.metrics import confusion
from esdmr.tensor import make_rng

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    manifest_path = data.write_disk_dataset(tmp / "disks", n=6, size=32, seed=0)
    print(manifest_path.read_text().splitlines()[0])
    m = data.read_manifest(manifest_path, resize_to=(32, 32))
    samples = data.load_entries(m.entries, (32, 32))
    print(f"{len(samples)} samples, image {samples[0].image.shape}, mask {samples[0].mask.shape}")

    # Named datasets follow their customary splits; 612 entries is the CVC size.
    fake = DatasetManifest("cvc", [ManifestEntry(Path(f"{i:03d}.png"), Path(f"{i:03d}_m.png"))
                                    for i in range(612)])
    tr, va, te = data.make_split(fake, "CVC-ClinicDB", seed=7)
    print("CVC-ClinicDB split:", len(tr), len(va), len(te))

    # A 1000x1000 tile becomes four overlapping 512x512 corner patches.
    print("corner offsets:", data.corner_offsets(1000, 1000, 512))

    # Overlays colour agreement and error; decoding recovers both maps.
    rng = make_rng(0)
    pred = (rng.random((24, 24)) < 0.4).astype(np.uint8)
    ref = (rng.random((24, 24)) < 0.4).astype(np.uint8)
    out = tmp / "overlay.png"
    data.save_png(out, data.render_overlay(pred, ref))
    c = confusion(pred, ref)
    print(f"overlay written; green={c.tp} red={c.fp} blue={c.fn} black={c.tn}")
