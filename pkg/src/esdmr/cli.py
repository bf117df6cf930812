"""Command line: train, eval, predict, gradcheck, info.

Model and training fields are flags named after the config fields
(``--stage-widths 16,32,48,56``, ``--use-dmr false``). Values resolve as
built-in defaults, then ``--config`` JSON, then explicit flags. The resolved
configuration is written as ``config.json`` next to every output.

Exit codes: 0 success, 1 gradcheck failure or nothing predicted,
2 configuration or checkpoint mismatch, 3 data error, 4 divergence.
Results go to stdout; diagnostics go to stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from . import data, gradcheck, metrics
from .model import CheckpointError, ModelConfig, build, layer_count, load, param_breakdown, param_count
from .trainer import TrainConfig, evaluate, holdout_last, predict_probs, train

log = logging.getLogger("esdmr")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {s!r}")


def _ints(s: str) -> tuple:
    try:
        return tuple(int(v) for v in s.replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


MODEL_FLAGS = {
    "input_channels": int, "stem_width": int, "stage_widths": _ints, "repeat": int,
    "expansion": int, "use_dmr": _bool, "input_size": _ints, "pool_stride": int, "seed": int,
}
TRAIN_FLAGS = {
    "lr": float, "batch_size": int, "max_epochs": int, "clip_norm": float, "patience": int,
    "min_delta": float, "max_steps": int, "recalibrate_bn": _bool,
}


def _add_config_flags(p: argparse.ArgumentParser, train_flags: bool):
    p.add_argument("--config", type=Path, help="JSON file with 'model' and 'train' sections")
    g = p.add_argument_group("model")
    for name, typ in MODEL_FLAGS.items():
        g.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    if train_flags:
        g = p.add_argument_group("training")
        for name, typ in TRAIN_FLAGS.items():
            g.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)


def resolve_configs(args) -> tuple[ModelConfig, TrainConfig]:
    """Defaults < --config file < explicit flags."""
    model_d, train_d = {}, {}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        unknown = set(raw) - {"model", "train", "data"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        model_d.update(raw.get("model", {}))
        train_d.update(raw.get("train", {}))
    for name in MODEL_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            model_d[name] = v
    explicit_patience = "patience" in train_d
    for name in TRAIN_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            train_d[name] = v
            explicit_patience |= name == "patience"
    try:
        mcfg = ModelConfig.from_dict(model_d).validate()
        tnames = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = set(train_d) - tnames
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        if "seed" not in train_d:
            train_d["seed"] = mcfg.seed
        tcfg = TrainConfig(**train_d)
        if not explicit_patience and tcfg.patience >= tcfg.max_epochs:
            # short runs: the default patience would break patience < max_epochs
            tcfg.patience = max(1, tcfg.max_epochs - 1)
        tcfg.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return mcfg, tcfg


def write_config(outdir: Path, mcfg: ModelConfig, tcfg: TrainConfig | None = None, extra: dict | None = None):
    outdir.mkdir(parents=True, exist_ok=True)
    doc = {"model": mcfg.to_dict()}
    if tcfg is not None:
        doc["train"] = tcfg.to_dict()
    if extra:
        doc["data"] = extra
    (outdir / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_set(entries, mcfg: ModelConfig) -> list:
    samples = data.load_entries(entries, mcfg.input_size)
    for s in samples:
        s.image = data.match_channels(s.image, mcfg.input_channels)
    return samples


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    mcfg, tcfg = resolve_configs(args)
    outdir = args.out
    manifest = data.read_manifest(args.manifest, resize_to=mcfg.input_size)
    tr, va, _ = data.make_split(manifest, args.dataset, seed=args.split_seed)
    if not tr:
        raise data.DataError(f"manifest {args.manifest} has no training entries")
    train_set = _load_set(tr, mcfg)
    val_set = _load_set(va, mcfg) if va else []
    if not val_set and args.val_fraction > 0 and len(train_set) >= 10:
        train_set, val_set = holdout_last(train_set, args.val_fraction)
    write_config(outdir, mcfg, tcfg, {"manifest": str(args.manifest), "dataset": args.dataset,
                                      "split_seed": args.split_seed, "val_fraction": args.val_fraction,
                                      "n_train": len(train_set), "n_val": len(val_set)})
    model = build(mcfg)
    ckpt = outdir / "best.ckpt"
    with open(outdir / "train_log.tsv", "w") as logf:
        result = train(model, train_set, val_set, tcfg, log_stream=logf, checkpoint_path=ckpt)
    print(f"checkpoint\t{ckpt}")
    print(f"best_epoch\t{result.best_epoch}")
    print(f"best_val_dsc\t{result.best_dsc:.6f}")
    print(f"epochs\t{len(result.history)}")
    print(f"steps\t{result.steps}")
    if result.diverged:
        log.error("training diverged; %s holds the last finite weights", ckpt)
        return EXIT_DIVERGED
    return EXIT_OK


def _load_model(args, mcfg: ModelConfig):
    try:
        return load(args.checkpoint, mcfg)
    except FileNotFoundError:
        raise data.DataError(f"checkpoint not found: {args.checkpoint}") from None


def cmd_eval(args) -> int:
    mcfg, _ = resolve_configs(args)
    model = _load_model(args, mcfg)
    manifest = data.read_manifest(args.manifest, resize_to=mcfg.input_size)
    if args.split == "all":
        entries = sorted(manifest.entries, key=lambda e: str(e.image))
    else:
        tr, va, te = data.make_split(manifest, args.dataset, seed=args.split_seed)
        entries = {"train": tr, "val": va, "test": te}[args.split]
    if not entries:
        raise data.DataError(f"no {args.split} entries in {args.manifest}")
    samples = _load_set(entries, mcfg)
    mean, reports = evaluate(model, samples)
    args.out.mkdir(parents=True, exist_ok=True)
    write_config(args.out, mcfg, None, {"manifest": str(args.manifest), "split": args.split,
                                        "checkpoint": str(args.checkpoint)})
    rows = [(Path(s.source_path).stem, r) for s, r in zip(samples, reports)]
    with open(args.out / "metrics.csv", "w", newline="") as f:
        metrics.write_csv(rows, f, mean)
    for k, v in zip(mean.COLUMNS, mean.values()):
        print(f"{k}\t{v:.6f}")
    if mean.flags:
        print(f"flags\t{','.join(sorted(mean.flags))}")
    return EXIT_OK


def cmd_predict(args) -> int:
    mcfg, _ = resolve_configs(args)
    model = _load_model(args, mcfg)
    refs = list(args.reference or [])
    if refs and len(refs) != len(args.images):
        raise ConfigError(f"{len(refs)} references for {len(args.images)} images")
    args.out.mkdir(parents=True, exist_ok=True)
    write_config(args.out, mcfg, None, {"checkpoint": str(args.checkpoint)})
    done = 0
    for i, path in enumerate(args.images):
        path = Path(path)
        try:
            h, w = data.image_extent(path)
            img = data.match_channels(data.load_image(path, mcfg.input_size), mcfg.input_channels)
        except data.DataError as exc:
            log.warning("skipping %s: %s", path, exc)
            continue
        sample = data.SegSample(img, np.zeros((1,) + img.shape[1:], np.uint8), str(path))
        prob = predict_probs(model, [sample])[0]
        prob = data._resize_plane(prob, (h, w), Image.BILINEAR)
        # fg > bg  <=>  fg > 0.5 for two-class softmax; ties stay background
        mask = (prob > 0.5).astype(np.uint8)
        mask_path = args.out / f"{path.stem}_mask.png"
        data.save_mask_png(mask_path, mask)
        print(f"mask\t{mask_path}")
        if refs:
            ref = data.load_mask(refs[i], (h, w))[0]
            over_path = args.out / f"{path.stem}_overlay.png"
            data.save_png(over_path, data.render_overlay(mask, ref))
            print(f"overlay\t{over_path}")
        done += 1
    if done == 0:
        log.error("no image could be read")
        return EXIT_FAIL
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = args.only or list(gradcheck.CHECKS)
    bad = [n for n in names if n not in gradcheck.CHECKS]
    if bad:
        raise ConfigError(f"unknown checks {bad}; choose from {list(gradcheck.CHECKS)}")
    print("check\tmax_rel_err\ttol\tseeds\tstatus")
    results = gradcheck.run(names, seeds=args.seeds, log=lambda line: print(line, flush=True))
    failed = [r.name for r in results if not r.ok]
    if failed:
        print(f"gradcheck failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_info(args) -> int:
    mcfg, _ = resolve_configs(args)
    t0 = time.perf_counter()
    model = _load_model(args, mcfg) if args.checkpoint else build(mcfg)
    print(f"param_count\t{param_count(model)}")
    print(f"layer_count\t{layer_count(model)}")
    for k, v in param_breakdown(model).items():
        print(f"params.{k}\t{v}")
    log.info("info took %.3f s", time.perf_counter() - t0)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="esdmr", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a manifest, keep the best checkpoint")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--dataset", help="named split convention (DRIVE, CHASE, CVC, ...)")
    p.add_argument("--split-seed", type=int, default=7)
    p.add_argument("--val-fraction", type=float, default=0.1,
                   help="hold out this tail of train for validation when the split has none")
    p.add_argument("--out", type=Path, default=Path("run"))
    _add_config_flags(p, True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-image metrics CSV with a mean row")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset")
    p.add_argument("--split-seed", type=int, default=7)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="all")
    p.add_argument("--out", type=Path, default=Path("eval"))
    _add_config_flags(p, False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write binary masks (and overlays given references)")
    p.add_argument("images", nargs="+", type=Path)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--reference", nargs="+", type=Path, help="reference masks, one per image")
    p.add_argument("--out", type=Path, default=Path("pred"))
    _add_config_flags(p, False)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference suite at 64-bit")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--only", nargs="+")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("info", help="parameter and layer counts")
    p.add_argument("--checkpoint", type=Path)
    _add_config_flags(p, False)
    p.set_defaults(func=cmd_info)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except data.DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
