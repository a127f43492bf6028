"""Command-line interface.

Every subcommand takes ``--config FILE`` and ``--preset NAME``; the
``FMRNET_SEED`` environment variable overrides the configured seed.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import Config, ConfigError, dump_config, load_config
from .imaging import (DatasetError, load_dataset, read_image, read_mask, slice_patches,
                      write_image)

logger = logging.getLogger("fmrnet")


def _config(args) -> Config:
    cfg = load_config(args.config, args.preset)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _dataset(args, cfg: Config):
    return load_dataset(args.dataset, size=cfg.imaging.resize, colorspace=cfg.imaging.colorspace)


def _train_images(index) -> list[np.ndarray]:
    return [index.load(e) for e in index.train]


def _load_model(path: str, cfg: Config | None = None):
    from .networks import load_checkpoint
    return load_checkpoint(path, cfg.network if cfg is not None else None)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _result_record(result, cfg: Config, truth: np.ndarray | None = None) -> dict:
    from .inspection import binarize_ksigma
    from .metrics import auc_roc, prf

    rec: dict = {"level": result.level, "timing_ms": result.timing}
    if result.patch_scores is not None:
        rec["patch_scores"] = [float(s) for s in result.patch_scores]
        rec["patch_origins"] = [list(o) for o in result.origins]
        rec["max_patch_score"] = float(np.max(result.patch_scores))
    if result.fused is not None:
        mask = binarize_ksigma(result.fused, cfg.inspection.k_sigma)
        rec["k_sigma"] = cfg.inspection.k_sigma
        rec["flagged_pixels"] = int(mask.sum())
        rec["max_fused"] = float(result.fused.max())
        if truth is not None:
            r = prf(mask, truth)
            rec.update(precision=r.precision, recall=r.recall, f1=r.f1,
                       tp=r.tp, fp=r.fp, fn=r.fn, tn=r.tn)
            if truth.any() and not truth.all():
                rec["pixel_auc"] = auc_roc(result.fused.ravel(), truth.ravel())
    return rec


def _write_maps(out: Path, stem: str, result, cfg: Config, modality: bool) -> None:
    from .inspection import binarize_ksigma

    if result.fused is None:
        return
    fused = result.fused
    scale = fused.max() if fused.max() > 0 else 1.0
    write_image(out / f"{stem}_fused.png", fused / scale, bits=16)
    write_image(out / f"{stem}_mask.png", binarize_ksigma(fused, cfg.inspection.k_sigma).astype(float))
    if modality:
        for name in ("gms", "ssim", "residual"):
            m = np.asarray(getattr(result.maps, name))
            write_image(out / f"{stem}_{name}.png", np.clip(m / max(m.max(), 1e-12), 0, 1), bits=16)


# subcommands

def cmd_synthesize(args) -> int:
    from .synthesis import make_training_pair

    cfg = _config(args)
    if args.image:
        images = [(Path(p).stem, read_image(p, cfg.imaging.colorspace, cfg.imaging.resize))
                  for p in args.image]
    else:
        index = _dataset(args, cfg)
        images = [(e.path.stem, index.load(e)) for e in index.train[:args.count]]
    rng = np.random.default_rng(cfg.seed)
    out = Path(args.out)
    for stem, img in images:
        synth, _, mask = make_training_pair(img, cfg.synth, rng, mode=args.mode)
        write_image(out / f"{stem}_synthetic.png", synth)
        write_image(out / f"{stem}_mask.png", mask[..., 0])
    print(f"wrote {len(images)} synthetic previews to {out}")
    return 0


def cmd_train(args) -> int:
    import torch

    from .networks import FMRNet, load_checkpoint, save_checkpoint
    from .pipeline import calibrate_threshold
    from .training import train

    cfg = _config(args)
    if args.t1:
        cfg.train.t1 = args.t1
    if args.t2:
        cfg.train.t2 = args.t2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.toml")
    images = _train_images(_dataset(args, cfg))
    torch.manual_seed(cfg.seed)
    if args.phase == "2":
        if not args.checkpoint:
            raise SystemExit("train --phase 2 needs --checkpoint from phase 1")
        model = load_checkpoint(args.checkpoint, cfg.network).model
    else:
        model = FMRNet(cfg.network)

    def progress(it, row):
        if it % max(1, args.log_every) == 0:
            logger.info("phase %d it %d loss %.4f rec %.5f", row["phase"], it, row["loss"], row["rec"])

    train(model, images, cfg, args.phase, out, callback=progress)
    if args.phase == "1":
        save_checkpoint(out / "phase1.pt", model, "phase1", cfg.train.t1)
        print(out / "phase1.pt")
    else:
        thr = calibrate_threshold(model, images, cfg)
        save_checkpoint(out / "model.pt", model, "phase2", cfg.train.t2,
                        extra={"patch_threshold": thr})
        print(out / "model.pt")
    return 0


def cmd_build_memory(args) -> int:
    from .networks import save_checkpoint
    from .pipeline import calibrate_threshold
    from .training import build_memory

    cfg = _config(args)
    ck = _load_model(args.checkpoint, cfg)
    images = _train_images(_dataset(args, cfg))
    build_memory(ck.model, images, cfg.train, seed=cfg.seed)
    thr = calibrate_threshold(ck.model, images, cfg)
    save_checkpoint(args.out, ck.model, ck.phase, ck.iteration,
                    extra={**ck.extra, "patch_threshold": thr})
    print(json.dumps({"memory_entries": ck.model.memory.size, "patch_threshold": thr}))
    return 0


def cmd_inspect(args) -> int:
    from .pipeline import inspect

    cfg = _config(args)
    ck = _load_model(args.checkpoint, cfg)
    threshold = args.threshold if args.threshold is not None else ck.extra.get("patch_threshold")
    out = Path(args.out)
    if args.mask and len(args.mask) != len(args.image):
        raise SystemExit("--mask needs one ground-truth file per --image")
    for i, path in enumerate(args.image):
        img = read_image(path, cfg.imaging.colorspace, cfg.imaging.resize)
        truth = read_mask(args.mask[i], img.shape[:2]) if args.mask else None
        result = inspect(ck.model, img, cfg, args.level, threshold)
        stem = Path(path).stem
        _write_maps(out, stem, result, cfg, args.modality_maps)
        rec = {"image": str(path), **_result_record(result, cfg, truth)}
        _write_json(out / f"{stem}.json", rec)
        print(f"{path}: level={result.level}"
              + (f" max_patch_score={rec['max_patch_score']:.4f}" if "max_patch_score" in rec else ""))
    return 0


def cmd_evaluate(args) -> int:
    from .inspection import binarize_ksigma
    from .metrics import auc_roc, prf, prf_from_counts
    from .pipeline import infer_patch_level, infer_pixel

    cfg = _config(args)
    ck = _load_model(args.checkpoint, cfg)
    index = _dataset(args, cfg)
    if not index.test:
        raise SystemExit("dataset has no test split")
    rows, pix_s, pix_l, pat_s, pat_l = [], [], [], [], []
    counts = np.zeros(4, dtype=np.int64)
    for e in index.test:
        img, truth = index.load(e), index.load_mask(e)
        res = infer_pixel(ck.model, img, cfg)
        pat = infer_patch_level(ck.model, img, cfg)
        mask = binarize_ksigma(res.fused, cfg.inspection.k_sigma)
        r = prf(mask, truth)
        rows.append({"image": str(e.path), "defect_type": e.defect_type, "label": e.label,
                     "mask_absent": e.mask_absent,
                     "max_patch_score": float(pat.patch_scores.max()),
                     "precision": r.precision, "recall": r.recall, "f1": r.f1})
        if e.mask_absent:
            # defective without ground truth: no pixel labels to score against
            continue
        counts += [r.tp, r.fp, r.fn, r.tn]
        pix_s.append(res.fused.ravel())
        pix_l.append(truth.ravel())
        grid = slice_patches(truth[..., None].astype(np.float32), cfg.network.patch,
                             cfg.imaging.effective_stride)
        pat_s.extend(pat.patch_scores.tolist())
        pat_l.extend(bool(p.any()) for p in grid.patches)
    tp, fp, fn, tn = (int(c) for c in counts)
    agg = prf_from_counts(tp, fp, fn, tn)

    def safe_auc(scores, labels):
        # None when only one class is present
        labels = np.asarray(labels, bool)
        return auc_roc(scores, labels) if 0 < labels.sum() < labels.size else None

    pix_s = np.concatenate(pix_s) if pix_s else np.zeros(0)
    pix_l = np.concatenate(pix_l) if pix_l else np.zeros(0, bool)
    report = {"pixel_auc_roc": safe_auc(pix_s, pix_l), "patch_auc_roc": safe_auc(pat_s, pat_l),
              "precision": agg.precision, "recall": agg.recall, "f1": agg.f1,
              "threshold": f"k_sigma={cfg.inspection.k_sigma}",
              "tp": tp, "fp": fp, "tn": tn, "fn": fn, "images": len(rows)}
    out = Path(args.out)
    _write_json(out, report)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    print(json.dumps(report, indent=2))
    return 0


def cmd_split_export(args) -> int:
    from .pipeline import split_export

    cfg = _config(args)
    ck = _load_model(args.checkpoint, cfg)
    img = read_image(args.image, cfg.imaging.colorspace, cfg.imaging.resize)
    data = split_export(ck.model, img, cfg, args.boundary)
    Path(args.out).write_bytes(data)
    print(f"{args.out}: {len(data)} bytes")
    return 0


def cmd_split_resume(args) -> int:
    from .pipeline import split_resume

    cfg = _config(args)
    ck = _load_model(args.checkpoint, cfg)
    result = split_resume(ck.model, Path(args.input).read_bytes(), cfg)
    out = Path(args.out)
    stem = Path(args.input).stem
    _write_maps(out, stem, result, cfg, args.modality_maps)
    _write_json(out / f"{stem}.json", {"input": str(args.input), **_result_record(result, cfg)})
    print(f"wrote {out / (stem + '_fused.png')}")
    return 0


def cmd_smoke(args) -> int:
    from .smoke import run_smoke, smoke_config

    cfg = smoke_config(args.t1, args.t2, seed=args.seed if args.seed is not None else 0)
    _, report = run_smoke(cfg, n_train=args.n_train, n_test=args.n_test, out_dir=args.out)
    summary = report.as_dict()
    checks = {"pixel_auc>=0.85": report.pixel_auc >= 0.85,
              "patch_auc>=0.90": report.patch_auc >= 0.90,
              "patch_faster_than_pixel": report.latency_ordering_ok}
    summary["checks"] = checks
    if args.out:
        _write_json(Path(args.out) / "smoke.json", summary)
    print(json.dumps(summary, indent=2))
    return 0 if all(checks.values()) else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--preset", choices=["paper", "tiny"], help="base preset (default: paper)")
    common.add_argument("--seed", type=int, help="override the seed (FMRNET_SEED also works)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fmrnet", description="Textured-surface defect inspection.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synthesize", parents=[common], help="preview synthetic defects")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", nargs="+")
    src.add_argument("--dataset")
    s.add_argument("--count", type=int, default=8, help="training images to use with --dataset")
    s.add_argument("--mode", choices=["occlusion", "destructive"])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("train", parents=[common], help="two-phase training")
    s.add_argument("--dataset", required=True)
    s.add_argument("--phase", choices=["1", "2", "all"], default="all")
    s.add_argument("--checkpoint", help="phase-1 checkpoint (for --phase 2)")
    s.add_argument("--t1", type=int)
    s.add_argument("--t2", type=int)
    s.add_argument("--log-every", type=int, default=100)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("build-memory", parents=[common], help="(re)establish the memory bank")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_memory)

    s = sub.add_parser("inspect", parents=[common], help="anomaly maps for images")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", nargs="+", required=True)
    s.add_argument("--level", choices=["patch", "pixel", "auto"], default="auto")
    s.add_argument("--threshold", type=float, help="patch threshold for --level auto")
    s.add_argument("--mask", nargs="+", help="optional ground-truth masks, one per image")
    s.add_argument("--modality-maps", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("evaluate", parents=[common], help="dataset metrics")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True, help="metrics JSON path")
    s.add_argument("--csv", help="per-image CSV path")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("split-export", parents=[common], help="run the edge head")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--boundary", default="after_encoder")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split_export)

    s = sub.add_parser("split-resume", parents=[common], help="run the cloud tail")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--modality-maps", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split_resume)

    s = sub.add_parser("smoke", parents=[common], help="desk-scale end-to-end run")
    s.add_argument("--t1", type=int, default=2000)
    s.add_argument("--t2", type=int, default=1000)
    s.add_argument("--n-train", type=int, default=200)
    s.add_argument("--n-test", type=int, default=50)
    s.add_argument("--out")
    s.set_defaults(func=cmd_smoke)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
