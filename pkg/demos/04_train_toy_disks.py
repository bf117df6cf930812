"""Train a small model to segment synthetic disks, then save and reload it.

Run: python3 demos/04_train_toy_disks.py   (about a minute on a laptop)
"""
import sys
import tempfile
from pathlib import Path

from esdmr import data
from esdmr.model import ModelConfig, build, load, save
from esdmr.trainer import TrainConfig, evaluate, train

samples = data.disk_images(4, size=64, seed=1)
cfg = ModelConfig(stem_width=8, stage_widths=(8, 8, 16, 16), repeat=1, input_size=(64, 64))
model = build(cfg)

print("before training, F1:", round(evaluate(model, samples)[0].f1, 4))
# No validation set here, so the monitor falls back to soft Dice on the
# training images. Batch norm statistics are refreshed before each score.
result = train(model, samples, [], TrainConfig(batch_size=4, max_epochs=80, patience=20),
               log_stream=sys.stdout)
mean, _ = evaluate(model, samples)
print(f"after {result.steps} steps (best epoch {result.best_epoch}): F1 {mean.f1:.4f}, "
      f"Jaccard {mean.jaccard:.4f}, AUC {mean.auc:.4f}")

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "disks.ckpt"
    save(model, path)
    again = load(path, cfg)
    print("reloaded checkpoint F1:", round(evaluate(again, samples)[0].f1, 4),
          f"({path.stat().st_size:,} bytes)")
