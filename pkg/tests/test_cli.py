import csv
import json

import numpy as np
import pytest
from PIL import Image

from esdmr import cli, data
from esdmr.model import ModelConfig, build, param_count, save
from esdmr.tensor import make_rng

MICRO_FLAGS = ["--stem-width", "4", "--stage-widths", "4,4,8,8", "--repeat", "1", "--input-size", "32,32"]
MICRO = ModelConfig(stem_width=4, stage_widths=(4, 4, 8, 8), repeat=1, input_size=(32, 32))


def info(capsys, *flags):
    assert cli.main(["info", *flags]) == 0
    out = dict(line.split("\t") for line in capsys.readouterr().out.strip().split("\n"))
    return {k: int(v) for k, v in out.items()}


def test_info_default_and_ablation(capsys):
    full = info(capsys)
    assert full["param_count"] == 694_540 and full["layer_count"] == 344
    abl = info(capsys, "--use-dmr", "false")
    dmr_total = sum(v for k, v in full.items() if k.startswith("params.dmr"))
    assert full["param_count"] - abl["param_count"] == dmr_total > 0
    assert sum(v for k, v in full.items() if k.startswith("params.")) == full["param_count"]


def test_info_config_file_and_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": {"stem_width": 4, "stage_widths": [4, 4, 8, 8], "repeat": 1}}))
    a = info(capsys, "--config", str(cfg))
    assert a["param_count"] == param_count(build(ModelConfig(stem_width=4, stage_widths=(4, 4, 8, 8), repeat=1)))
    b = info(capsys, "--config", str(cfg), "--repeat", "2")
    assert b["param_count"] > a["param_count"]


def test_unknown_flag_rejected():
    with pytest.raises(SystemExit) as e:
        cli.main(["info", "--widths", "3"])
    assert e.value.code == 2


def test_bad_config_value_exits_2(capsys):
    assert cli.main(["info", "--stage-widths", "16,8,32,32"]) == 2
    assert "stage_widths" in capsys.readouterr().err


def test_train_writes_checkpoint_and_log(tmp_path, capsys):
    manifest = data.write_disk_dataset(tmp_path / "d", 4, 32, 0)
    out = tmp_path / "run"
    code = cli.main(["train", "--manifest", str(manifest), "--out", str(out), "--max-epochs", "2",
                     "--batch-size", "4", *MICRO_FLAGS])
    assert code == 0
    assert (out / "best.ckpt").exists()
    lines = (out / "train_log.tsv").read_text().strip().split("\n")
    assert len(lines) == 3
    doc = json.loads((out / "config.json").read_text())
    assert doc["model"]["stage_widths"] == [4, 4, 8, 8] and doc["train"]["max_epochs"] == 2
    printed = dict(l.split("\t") for l in capsys.readouterr().out.strip().split("\n"))
    assert printed["epochs"] == "2"


def test_train_missing_mask_exits_3(tmp_path, capsys):
    img = tmp_path / "a.png"
    Image.fromarray(np.zeros((32, 32), np.uint8)).save(img)
    (tmp_path / "m.tsv").write_text("a.png\tgone_mask.png\ttrain\n")
    code = cli.main(["train", "--manifest", str(tmp_path / "m.tsv"), "--out", str(tmp_path / "r"), *MICRO_FLAGS])
    assert code == 3
    assert "gone_mask.png" in capsys.readouterr().err


def oracle_checkpoint(path):
    """Grayscale model whose foreground logit is a threshold on the raw image."""
    cfg = ModelConfig(input_channels=1, stem_width=4, stage_widths=(4, 4, 8, 8), repeat=1,
                      input_size=(32, 32), use_dmr=False)
    m = build(cfg)
    k = m.input.conv.kernel.data
    k[:] = 0
    k[0, 0, k.shape[2] // 2, k.shape[3] // 2] = 1.0   # stem channel 0 copies the image
    w = m.output.conv.kernel.data
    w[:] = 0
    stem0 = m.config.stage_widths[0]                  # stem follows the decoder features
    w[0, stem0, 0, 0], w[1, stem0, 0, 0] = -10.0, 10.0
    m.output.bn.beta.data[:] = [5.0, -5.0]
    save(m, path)
    return ["--input-channels", "1", "--use-dmr", "false", *MICRO_FLAGS]


def write_pairs(root, n, seed=0):
    rng = make_rng(seed)
    lines = []
    for i in range(n):
        mask = np.zeros((32, 32), np.uint8)
        y, x = rng.integers(4, 20, size=2)
        mask[y:y + 9, x:x + 7] = 255
        Image.fromarray(mask).save(root / f"im{i}.png")
        Image.fromarray(mask).save(root / f"im{i}_mask.png")
        lines.append(f"im{i}.png\tim{i}_mask.png\ttest\n")
    (root / "m.tsv").write_text("".join(lines))
    return root / "m.tsv"


def test_eval_oracle_checkpoint_scores_one(tmp_path, capsys):
    flags = oracle_checkpoint(tmp_path / "o.ckpt")
    manifest = write_pairs(tmp_path, 3)
    out = tmp_path / "ev"
    assert cli.main(["eval", "--manifest", str(manifest), "--checkpoint", str(tmp_path / "o.ckpt"),
                     "--out", str(out), *flags]) == 0
    rows = list(csv.reader(open(out / "metrics.csv")))
    assert len(rows) == 1 + 3 + 1
    header, mean = rows[0], rows[-1]
    assert mean[0] == "mean" and mean[header.index("f1")] == "1.000000"
    for r in rows[1:]:
        assert all(0 <= float(v) <= 1 for v in r[1:])
    assert "f1\t1.000000" in capsys.readouterr().out


def test_predict_mask_and_overlay(tmp_path, capsys):
    ckpt = tmp_path / "o.ckpt"
    flags = oracle_checkpoint(ckpt)
    rgb = np.zeros((45, 70, 3), np.uint8)
    rgb[10:30, 20:50] = 255
    Image.fromarray(rgb).save(tmp_path / "x.png")
    ref = (rgb[..., 0] > 0).astype(np.uint8) * 255
    ref[0:5, 0:5] = 255
    Image.fromarray(ref).save(tmp_path / "x_ref.png")
    out = tmp_path / "pred"
    assert cli.main(["predict", str(tmp_path / "x.png"), "--checkpoint", str(ckpt), "--reference",
                     str(tmp_path / "x_ref.png"), "--out", str(out), *flags]) == 0
    mask = np.asarray(Image.open(out / "x_mask.png"))
    assert mask.shape == (45, 70) and set(np.unique(mask)) <= {0, 255}
    assert mask[20, 35] == 255 and mask[40, 5] == 0
    over = np.asarray(Image.open(out / "x_overlay.png").convert("RGB")).reshape(-1, 3)
    palette = {data.GREEN, data.RED, data.BLUE, data.BLACK}
    assert {tuple(int(c) for c in px) for px in np.unique(over, axis=0)} <= palette


def test_predict_nothing_readable_exits_1(tmp_path):
    ckpt = tmp_path / "o.ckpt"
    flags = oracle_checkpoint(ckpt)
    (tmp_path / "bad.png").write_bytes(b"junk")
    assert cli.main(["predict", str(tmp_path / "bad.png"), "--checkpoint", str(ckpt),
                     "--out", str(tmp_path / "p"), *flags]) == 1


def test_checkpoint_config_mismatch_exits_2(tmp_path, capsys):
    ckpt = tmp_path / "o.ckpt"
    save(build(MICRO), ckpt)
    assert cli.main(["info", "--checkpoint", str(ckpt), "--use-dmr", "false", *MICRO_FLAGS]) == 2
    assert "dmr.0" in capsys.readouterr().err


def test_gradcheck_only(capsys):
    assert cli.main(["gradcheck", "--only", "relu", "softmax", "--seeds", "3"]) == 0
    lines = capsys.readouterr().out.strip().split("\n")
    assert lines[0].startswith("check\t") and len(lines) == 3
    assert all(l.split("\t")[-1] == "ok" for l in lines[1:])


def test_gradcheck_unknown_name_exits_2():
    assert cli.main(["gradcheck", "--only", "nope"]) == 2
