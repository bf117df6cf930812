import logging
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from esdmr import data
from esdmr.data import DatasetManifest, ManifestEntry
from esdmr.metrics import confusion
from esdmr.tensor import make_rng


def write(path, arr, mode=None):
    Image.fromarray(arr, mode=mode).save(path)
    return path


def test_all_255_mask(tmp_path):
    p = write(tmp_path / "m.png", np.full((10, 12), 255, np.uint8))
    m = data.load_mask(p)
    assert m.shape == (1, 10, 12) and np.all(m == 1)


def test_rgb_resize_shapes_and_binary_mask(tmp_path):
    rng = make_rng(0)
    img = write(tmp_path / "i.png", rng.integers(0, 256, (400, 600, 3)).astype(np.uint8))
    mask = write(tmp_path / "m.png", (rng.random((400, 600)) < 0.3).astype(np.uint8) * 200)
    s = data.load_sample(img, mask, (256, 256))
    assert s.image.shape == (3, 256, 256) and s.mask.shape == (1, 256, 256)
    assert set(np.unique(s.mask)) <= {0, 1}
    assert s.image.min() >= 0 and s.image.max() <= 1


def test_16bit_grayscale(tmp_path):
    arr = np.array([[0, 65535], [32768, 1000]], np.uint16)
    p = tmp_path / "g.png"
    Image.fromarray(arr).save(p)
    img = data.load_image(p)
    assert img.shape == (1, 2, 2)
    np.testing.assert_allclose(img[0], arr / 65535.0, rtol=1e-6)


def test_load_deterministic(tmp_path):
    rng = make_rng(1)
    img = write(tmp_path / "i.png", rng.integers(0, 256, (20, 30, 3)).astype(np.uint8))
    mask = write(tmp_path / "m.png", rng.integers(0, 2, (20, 30)).astype(np.uint8) * 255)
    a = data.load_sample(img, mask, (32, 32))
    b = data.load_sample(img, mask, (32, 32))
    assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)


def test_extent_mismatch_names_paths(tmp_path):
    img = write(tmp_path / "i.png", np.zeros((10, 10), np.uint8))
    mask = write(tmp_path / "m.png", np.zeros((12, 10), np.uint8))
    with pytest.raises(data.DataError) as e:
        data.load_sample(img, mask)
    assert "i.png" in str(e.value) and "m.png" in str(e.value)


def test_unreadable_file(tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(data.DataError, match="bad.png"):
        data.load_image(bad)
    with pytest.raises(data.DataError, match="missing.png"):
        data.load_image(tmp_path / "missing.png")


def test_match_channels():
    g = np.ones((1, 4, 4), np.float32)
    assert data.match_channels(g, 3).shape == (3, 4, 4)
    assert data.match_channels(np.ones((3, 4, 4), np.float32), 1).shape == (1, 4, 4)


# -- patches ------------------------------------------------------------------

def test_corner_offsets_1000():
    assert data.corner_offsets(1000, 1000, 512) == [(0, 0), (0, 488), (488, 0), (488, 488)]


def test_corner_patches_slice_oracle():
    img = make_rng(2).random((3, 1000, 1000)).astype(np.float32)
    patches = data.corner_patches(img, 512)
    assert len(patches) == 4
    for (y, x), p in zip([(0, 0), (0, 488), (488, 0), (488, 488)], patches):
        assert np.array_equal(p, img[:, y:y + 512, x:x + 512])
    # overlap band 488..511 is shared by the left and right patches
    assert np.array_equal(patches[0][:, :, 488:], patches[1][:, :, :24])


def test_corner_patches_degenerate_and_small():
    img = make_rng(3).random((512, 512))
    ps = data.corner_patches(img)
    assert all(np.array_equal(p, img) for p in ps)
    with pytest.raises(ValueError):
        data.corner_patches(np.zeros((500, 600)))


def test_corner_coverage():
    h = w = 1000
    covered = np.zeros((h, w), bool)
    for y, x in data.corner_offsets(h, w):
        covered[y:y + 512, x:x + 512] = True
    assert covered[0, 0] and covered[0, -1] and covered[-1, 0] and covered[-1, -1]


# -- splits -------------------------------------------------------------------

def manifest(n, name="x"):
    return DatasetManifest(name, [ManifestEntry(Path(f"img{i:03d}.png"), Path(f"m{i:03d}.png")) for i in range(n)])


def check_partition(m, parts):
    ids = [str(e.image) for part in parts for e in part]
    assert sorted(ids) == sorted(str(e.image) for e in m.entries)
    assert len(ids) == len(set(ids))


def test_drive_split():
    m = manifest(40)
    tr, va, te = data.make_split(m, "DRIVE")
    assert (len(tr), len(va), len(te)) == (20, 0, 20)
    check_partition(m, (tr, va, te))


def test_cvc_split_sizes_and_seed():
    m = manifest(612)
    tr, va, te = data.make_split(m, "CVC-ClinicDB", seed=7)
    assert (len(tr), len(va), len(te)) == (490, 61, 61)
    check_partition(m, (tr, va, te))
    tr2, _, _ = data.make_split(m, "CVC-ClinicDB", seed=7)
    assert [e.image for e in tr] == [e.image for e in tr2]
    tr3, _, _ = data.make_split(m, "CVC-ClinicDB", seed=8)
    assert [e.image for e in tr] != [e.image for e in tr3]


def test_chase_split_round_half_up():
    m = manifest(28)
    tr, va, te = data.make_split(m, "CHASE")
    assert (len(tr), len(va), len(te)) == (20, 0, 8)
    assert [str(e.image) for e in tr] == [f"img{i:03d}.png" for i in range(20)]


def test_count_mismatch_warns_and_splits(caplog):
    m = manifest(30)
    with caplog.at_level(logging.WARNING):
        tr, va, te = data.make_split(m, "DRIVE")
    assert "30" in caplog.text
    assert len(tr) == 15 and len(te) == 15
    check_partition(m, (tr, va, te))


def test_manifest_split_column(tmp_path):
    (tmp_path / "m.tsv").write_text("a.png\ta_m.png\ttrain\nb.png\tb_m.png\tval\nc.png\tc_m.png\ttest\n")
    m = data.read_manifest(tmp_path / "m.tsv")
    tr, va, te = data.make_split(m)
    assert [len(tr), len(va), len(te)] == [1, 1, 1]
    assert tr[0].image == tmp_path / "a.png"


def test_manifest_bad_split(tmp_path):
    (tmp_path / "m.tsv").write_text("a.png\ta_m.png\tholdout\n")
    with pytest.raises(data.DataError):
        data.read_manifest(tmp_path / "m.tsv")


# -- overlays -----------------------------------------------------------------

def test_overlay_colours():
    ones = np.ones((3, 3), np.uint8)
    assert np.all(data.render_overlay(ones, ones) == data.GREEN)
    assert np.all(data.render_overlay(ones, 0 * ones) == data.RED)
    assert np.all(data.render_overlay(0 * ones, ones) == data.BLUE)
    assert np.all(data.render_overlay(0 * ones, 0 * ones) == data.BLACK)


def test_overlay_png_round_trip(tmp_path):
    rng = make_rng(4)
    for i in range(5):
        p, r = (rng.random((2, 9, 11)) < 0.5).astype(np.uint8)
        path = tmp_path / f"o{i}.png"
        data.save_png(path, data.render_overlay(p, r))
        rgb = np.asarray(Image.open(path).convert("RGB"))
        dp, dr = data.decode_overlay(rgb)
        assert np.array_equal(dp, p) and np.array_equal(dr, r)
        c = confusion(p, r)
        counts = {tuple(k): v for k, v in zip(*np.unique(rgb.reshape(-1, 3), axis=0, return_counts=True))}
        assert counts.get(data.GREEN, 0) == c.tp and counts.get(data.RED, 0) == c.fp
        assert counts.get(data.BLUE, 0) == c.fn and counts.get(data.BLACK, 0) == c.tn


def test_disk_dataset(tmp_path):
    path = data.write_disk_dataset(tmp_path, 3, 32, 0)
    m = data.read_manifest(path, resize_to=(32, 32))
    samples = data.load_entries(m.entries, (32, 32))
    assert len(samples) == 3
    ref = data.disk_images(3, 32, 0)
    for s, r in zip(samples, ref):
        assert np.array_equal(s.mask, r.mask)
