"""Command line entry point: ``svanet <command> [options]``."""

from __future__ import annotations

import argparse
import json
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from . import config as config_text
from .ablation import AXES, run_ablation
from .core import ConfigurationError, Rng, Tensor, no_grad
from .data.area import area_stats, read_manifest
from .data.dataset import SegmentationDataset, iterate_batches, read_image
from .data.synthetic import generate_splits
from .metrics import stratified_eval, write_roc_csv
from .model import build, count_params_macs, load_checkpoint
from .presets import PRESETS, RunConfig, load
from .train import fit_multi, predict

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_MISSING = 0, 1, 2, 3
REFERENCE_PARAMS = 177.64e6
REFERENCE_MACS = 312.76e9


class Outputs:
    """Files written under ``--out``, listed in ``manifest.json`` on close."""

    def __init__(self, root, command: str, argv: list[str]):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.command, self.argv = command, argv
        self.files: list[str] = []
        self.errors: list[str] = []

    def path(self, name: str) -> Path:
        p = self.root / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(name)
        return p

    def write_text(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.write_text(text)
        return p

    def write_json(self, name: str, obj) -> Path:
        return self.write_text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def close(self, code: int) -> None:
        manifest = {"command": self.command, "argv": self.argv, "version": __version__,
                    "exit_code": code, "errors": self.errors, "files": sorted(set(self.files))}
        (self.root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _config(args) -> RunConfig:
    cfg = load(args.preset, args.config, args.set or [])
    if args.seed is not None:
        n = getattr(args, "seeds", None) or len(cfg.train.seeds)
        cfg = replace(cfg, train=replace(cfg.train, seeds=tuple(range(args.seed, args.seed + n))),
                      data=replace(cfg.data, synth=replace(cfg.data.synth, seed=args.seed)))
    elif getattr(args, "seeds", None):
        cfg = replace(cfg, train=replace(cfg.train, seeds=tuple(range(args.seeds))))
    return cfg


def _datasets(cfg: RunConfig, out: Outputs, data_arg: str | None):
    root = data_arg or cfg.data.root
    if root is None:
        root = out.root / "data"
        if not (root / "train" / "manifest.jsonl").exists():
            spec = replace(cfg.data.synth, num_classes=cfg.data.num_classes)
            generate_splits(spec, root, cfg.data.train_count, cfg.data.test_count)
    root = Path(root)
    if (root / "train").is_dir():
        train = SegmentationDataset(root / "train", cfg.data.num_classes)
        test_dir = root / "test" if (root / "test").is_dir() else root / "train"
        return train, SegmentationDataset(test_dir, cfg.data.num_classes)
    ds = SegmentationDataset(root, cfg.data.num_classes)
    return ds, ds


def _progress(seed, entry):
    print(f"seed {seed} epoch {entry['epoch']:>3} lr {entry['lr']:.3e} loss {entry['loss']:.5f}", flush=True)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_train(args, out: Outputs) -> int:
    cfg = _config(args)
    out.write_text("config.txt", cfg.to_text())
    train, test = _datasets(cfg, out, args.data)
    logs, summary = fit_multi(cfg.model, cfg.train, train, test, out.root / "runs", test,
                              None if args.quiet else _progress)
    for lg in logs:
        out.files.append(f"runs/seed{lg.seed}/runlog.jsonl")
        if lg.status != "ok":
            out.errors.append(f"seed {lg.seed}: {lg.status}")
    out.write_json("summary.json", summary)
    for bucket, stats in summary["buckets"].items():
        md = stats.get("mdice")
        if md:
            print(f"{bucket:<11} mDice {md['mean']:.4f} +- {md['sd']:.4f}")
    return EXIT_ERROR if out.errors else EXIT_OK


def _load_model(path, out: Outputs):
    if not path or not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model, _ = load_checkpoint(path)
    out.write_text("config.txt", config_text.to_text(model.cfg))
    return model


def cmd_eval(args, out: Outputs) -> int:
    model = _load_model(args.checkpoint, out)
    ds = SegmentationDataset(args.data, model.cfg.num_classes)
    probs, masks = [], []
    for images, m, _ in iterate_batches(ds, args.batch_size):
        probs.append(predict(model, images, args.batch_size))
        masks.append(m)
    probs_a, masks_a = np.concatenate(probs), np.concatenate(masks)
    report = stratified_eval(probs_a, masks_a)
    out.write_text("report.json", report.to_json() + "\n")
    out.write_text("report.txt", report.table() + "\n")
    if args.emit_roc:
        write_roc_csv(out.path("roc.csv"), probs_a, masks_a)
    print(report.table())
    return EXIT_OK


def cmd_infer(args, out: Outputs) -> int:
    model = _load_model(args.checkpoint, out)
    src = Path(args.images)
    if (src / "images").is_dir():
        src = src / "images"
    paths = sorted(p for p in src.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp", ".tif"))
    if not paths:
        raise FileNotFoundError(f"no images in {src}")
    for p in paths:
        img = read_image(p)
        probs = predict(model, img[None])[0]
        pred = probs.argmax(axis=0).astype(np.uint8)
        Image.fromarray(pred, "L").save(out.path(f"masks/{p.stem}.png"))
        if args.probs:
            np.save(out.path(f"probs/{p.stem}.npy"), probs.astype(np.float32))
    print(f"wrote {len(paths)} masks to {out.root / 'masks'}")
    return EXIT_OK


def cmd_synth(args, out: Outputs) -> int:
    cfg = _config(args)
    out.write_text("config.txt", cfg.to_text())
    spec = replace(cfg.data.synth, num_classes=cfg.data.num_classes)
    results = generate_splits(spec, out.root, args.train or cfg.data.train_count, args.test or cfg.data.test_count)
    for split, res in results.items():
        out.files += [f"{split}/manifest.jsonl", f"{split}/synth.json"]
        print(f"{split}: {len(res.records)} objects, {len(res.skipped)} skipped")
    return EXIT_OK


def cmd_area_stats(args, out: Outputs) -> int:
    cfg = _config(args)
    mask_dir = Path(args.masks)
    if (mask_dir / "masks").is_dir():
        mask_dir = mask_dir / "masks"
    report = area_stats(mask_dir, cfg.data.num_classes)
    out.write_text("objects.jsonl", "".join(r.to_json() + "\n" for r in report.records))
    out.write_json("area.json", {"histogram": {str(k): v for k, v in report.histogram().items()},
                                 "objects": len(report.records), "errors": report.errors})
    print(report.table())
    manifest = mask_dir.parent / "manifest.jsonl"
    if manifest.exists():
        same = sorted(read_manifest(manifest), key=_record_key) == sorted(report.records, key=_record_key)
        print(f"manifest agreement: {'exact' if same else 'MISMATCH'}")
        if not same:
            out.errors.append("manifest disagrees with recomputed records")
    out.errors += [f"{e['file']}: {e['error']}" for e in report.errors]
    return EXIT_ERROR if out.errors else EXIT_OK


def _record_key(r):
    return (r.image_id, r.class_id, r.pixels)


def cmd_ablate(args, out: Outputs) -> int:
    cfg = _config(args)
    out.write_text("config.txt", cfg.to_text())
    train = test = None
    if not args.no_train:
        train, test = _datasets(cfg, out, args.data)
    result = run_ablation(args.axis, cfg, train, test, out.root / "ablation", None if args.quiet else _progress)
    out.files += ["ablation/ablation.json", "ablation/ablation.txt"]
    print(result.table())
    return EXIT_OK


def hardware_info() -> dict:
    import os

    return {"machine": platform.machine(), "processor": platform.processor() or "unknown",
            "python": platform.python_version(), "numpy": np.__version__, "cpus": os.cpu_count(),
            "system": platform.system()}


def cmd_bench(args, out: Outputs) -> int:
    if args.checkpoint:
        model = _load_model(args.checkpoint, out)
    else:
        model = build(_config(args).model, 0)
    h = w = args.input
    report = count_params_macs(model, (h, w))
    times = []
    if args.runs > 0:
        x = Tensor(Rng(0, "bench").random((1, 3, h, w), dtype=np.float32))
        with no_grad():
            for _ in range(args.warmup):
                model(x)
            for _ in range(args.runs):
                t0 = time.perf_counter()
                model(x)
                times.append(time.perf_counter() - t0)
    fps = [1.0 / t for t in times]
    result = {
        "params": report.params, "macs": report.macs, "input_hw": [h, w],
        "params_by_module": report.params_by_module, "macs_by_module": report.macs_by_module,
        "runs": len(times),
        "fps_mean": float(np.mean(fps)) if fps else None,
        "fps_sd": float(np.std(fps, ddof=1)) if len(fps) > 1 else None,
        "hardware": hardware_info(),
        "reference": {"params": REFERENCE_PARAMS, "macs": REFERENCE_MACS,
                      "params_delta": report.params - REFERENCE_PARAMS, "macs_delta": report.macs - REFERENCE_MACS},
    }
    out.write_json("bench.json", result)
    print(report.table())
    print(f"params {report.params / 1e6:.2f} M (reference {REFERENCE_PARAMS / 1e6:.2f} M, "
          f"delta {(report.params - REFERENCE_PARAMS) / 1e6:+.2f} M)")
    print(f"MACs   {report.macs / 1e9:.2f} G at {h}x{w} (reference {REFERENCE_MACS / 1e9:.2f} G, "
          f"delta {(report.macs - REFERENCE_MACS) / 1e9:+.2f} G)")
    if fps:
        sd = f" +- {result['fps_sd']:.3f}" if result["fps_sd"] is not None else ""
        print(f"FPS    {result['fps_mean']:.3f}{sd} over {len(fps)} runs")
    print("hardware: " + ", ".join(f"{k}={v}" for k, v in result["hardware"].items()))
    return EXIT_OK


def feature_image(fmap: np.ndarray) -> np.ndarray:
    """Channel-mean map scaled to 0..255; a flat map becomes mid-gray."""
    m = fmap.mean(axis=0)
    lo, hi = float(m.min()), float(m.max())
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.full(m.shape, 128, dtype=np.uint8)
    return np.round((m - lo) / (hi - lo) * 255).astype(np.uint8)


def cmd_dump_features(args, out: Outputs) -> int:
    model = _load_model(args.checkpoint, out)
    valid = model.tap_names()
    taps = [t.strip() for t in args.taps.split(",") if t.strip()] if args.taps else valid
    unknown = [t for t in taps if t not in valid]
    if unknown:
        raise ConfigurationError(f"unknown taps {unknown}; valid taps: {', '.join(valid)}")
    img = read_image(Path(args.image))
    collected: dict = {}
    with no_grad():
        model(Tensor(img[None]), taps=collected)
    for t in taps:
        Image.fromarray(feature_image(collected[t].data[0]), "L").save(out.path(f"features/{t}.png"))
    print(f"wrote {len(taps)} feature maps to {out.root / 'features'}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file with 'dotted.key = value' lines")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
    common.add_argument("--seed", type=int, help="base seed for training runs and data generation")
    common.add_argument("--out", default="runs/latest", help="output directory")
    common.add_argument("--preset", default="full", choices=sorted(PRESETS))
    common.add_argument("--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="svanet", description="Small-object segmentation network toolkit.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", parents=[common], help="train one model per seed")
    s.add_argument("--data", help="dataset root (with train/ and test/ or a single split)")
    s.add_argument("--seeds", type=int, help="number of seeds to run")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="stratified report for a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--batch-size", type=int, default=4)
    s.add_argument("--emit-roc", action="store_true", help="also write ROC points as CSV")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", parents=[common], help="write predicted index masks")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--images", required=True)
    s.add_argument("--probs", action="store_true", help="also write per-class probability maps")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--train", type=int)
    s.add_argument("--test", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("area-stats", parents=[common], help="object size histogram of a mask directory")
    s.add_argument("--masks", required=True)
    s.set_defaults(func=cmd_area_stats)

    s = sub.add_parser("ablate", parents=[common], help="compare variants along one axis")
    s.add_argument("axis", choices=AXES)
    s.add_argument("--data")
    s.add_argument("--seeds", type=int)
    s.add_argument("--no-train", action="store_true", help="only build variants and count parameters")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("bench", parents=[common], help="parameters, MACs and forward throughput")
    s.add_argument("--checkpoint")
    s.add_argument("--input", type=int, default=512)
    s.add_argument("--runs", type=int, default=1000)
    s.add_argument("--warmup", type=int, default=1)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("dump-features", parents=[common], help="save channel-mean feature maps")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--taps", help="comma separated tap names (default: all)")
    s.set_defaults(func=cmd_dump_features)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    out = Outputs(args.out, args.command, argv)
    try:
        code = args.func(args, out)
    except ConfigurationError as exc:
        out.errors.append(str(exc))
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    except FileNotFoundError as exc:
        out.errors.append(str(exc))
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_MISSING
    out.close(code)
    return code


if __name__ == "__main__":
    sys.exit(main())
