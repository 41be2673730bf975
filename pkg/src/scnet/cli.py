"""Command line interface.

Every command follows ``scnet <command> --config <path> [--out <dir>]
[--set key=value ...]``. Exit codes: 0 success, 2 configuration problem,
3 data problem, 4 training divergence.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys

import numpy as np
import torch
from PIL import Image

from .config import ConfigError, DataError, DivergenceError, PriorConfig, load_run_config
from .datapipe import (
    Manifest,
    imbalance_stats,
    load_image,
    scan_dataset,
    split_holdout,
    write_binary_png,
)
from .metrics import default_threshold_grid
from .model import SCNet, init_weights, load_checkpoint, parameter_count, predict, save_checkpoint
from .prior import EdgePrior, assemble_input
from .synth import STYLES, generate_corpus
from .trainer import (
    ABLATION_VARIANTS,
    cross_evaluate,
    derive_class_weights,
    evaluate,
    materialize,
    run_ablation,
    train,
    write_ablation_csv,
    write_cross_csv,
)

log = logging.getLogger(__name__)


def _load_manifest(cfg) -> Manifest:
    path = os.path.join(cfg.data.root, "manifest.json")
    manifest = Manifest.load(path) if os.path.isfile(path) else scan_dataset(cfg.data)
    if len(manifest) == 0:
        raise DataError(f"dataset at {cfg.data.root} has no usable samples")
    return manifest


def _split(cfg):
    manifest = _load_manifest(cfg)
    return split_holdout(manifest, cfg.data.split_fraction, cfg.data.split_seed)


def _ensure_out(args) -> str:
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def cmd_synth(args) -> int:
    out = _ensure_out(args)
    seed = int(os.environ.get("SCNET_SEED", args.seed))
    manifest = generate_corpus(
        out, count=args.count, size=args.size, style=args.style, fg_percent=args.fg, seed=seed
    )
    fg, bg = imbalance_stats(manifest)
    print(f"wrote {len(manifest)} samples to {out} (crack share {fg:.2f}%)")
    return 0


def cmd_stats(args) -> int:
    cfg = load_run_config(args.config, args.set)
    manifest = _load_manifest(cfg)
    fg, bg = imbalance_stats(manifest)
    print(f"dataset {manifest.tag}: {len(manifest)} samples, crack {fg:.2f}% background {bg:.2f}%")
    if args.out:
        out = _ensure_out(args)
        manifest.save(os.path.join(out, "manifest.json"))
        with open(os.path.join(out, "stats.csv"), "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["tag", "samples", "crack_pct", "noncrack_pct"])
            writer.writerow([manifest.tag, len(manifest), f"{fg:.2f}", f"{bg:.2f}"])
    return 0


def cmd_edges(args) -> int:
    cfg = load_run_config(args.config, args.set)
    if cfg.prior.mode == "precomputed":
        raise ConfigError("prior mode 'precomputed' has nothing to compute; pick another mode")
    manifest = _load_manifest(cfg)
    out = args.out or os.path.join(cfg.data.root, "edges")
    os.makedirs(out, exist_ok=True)
    prior = EdgePrior(cfg.prior)
    for rec in manifest:
        edge = prior.edge_map(load_image(rec.image_path))
        write_binary_png(edge, os.path.join(out, f"{rec.sample_id}.edge.png"))
    print(f"wrote {len(manifest)} edge maps to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.set)
    out = _ensure_out(args)
    train_man, test_man = _split(cfg)
    if len(train_man) == 0:
        raise DataError("training split is empty; lower data.split_fraction")
    train_man.save(os.path.join(out, "train_manifest.json"))
    test_man.save(os.path.join(out, "test_manifest.json"))
    loss_cfg = derive_class_weights(train_man, cfg.loss)
    augment = cfg.data.augment if cfg.data.augment.enabled else None
    samples = materialize(train_man, cfg.model, cfg.prior, augment)
    val = (
        materialize(test_man, cfg.model, cfg.prior, None) if len(test_man) else None
    )
    model = SCNet(cfg.model)
    init_weights(model, cfg.train.init_scheme, cfg.train.seed, cfg.train.encoder_checkpoint)
    print(f"training {parameter_count(model)} parameters on {len(samples)} samples")
    result = train(model, samples, cfg.train, loss_cfg, out_dir=out, val_samples=val)
    last = result.history[-1]["loss_total"] if result.history else float("nan")
    print(
        f"finished after {result.iterations} iterations, final loss {last:.4f}, "
        f"checkpoint {result.checkpoint_path}"
    )
    return 0


def _load_eval_model(args) -> tuple[SCNet, dict]:
    if not args.checkpoint:
        raise ConfigError("this command needs --checkpoint")
    return load_checkpoint(args.checkpoint)


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config, args.set)
    model, _ = _load_eval_model(args)
    if args.manifest:
        test_man = Manifest.load(args.manifest)
    else:
        _, test_man = _split(cfg)
    if len(test_man) == 0:
        raise DataError("holdout split is empty; raise data.split_fraction or pass --manifest")
    samples = materialize(test_man, model.config, cfg.prior, None)
    report = evaluate(model, samples)
    print(
        f"t*={report.threshold:.2f} pixel F1 {report.pixel_f1:.4f} IoU {report.pixel_iou:.4f} "
        f"region F1 {report.region_f1:.4f} AUPRC {report.auprc:.4f}"
    )
    if args.out:
        out = _ensure_out(args)
        report.write_metrics_csv(os.path.join(out, "metrics.csv"))
        report.write_prc_csv(os.path.join(out, "prc.csv"))
        save_checkpoint(model, os.path.join(out, "model_with_threshold.ckpt"),
                        extra={"threshold": report.threshold})
    return 0


def cmd_threshold(args) -> int:
    cfg = load_run_config(args.config, args.set)
    model, _ = _load_eval_model(args)
    if args.manifest:
        test_man = Manifest.load(args.manifest)
    else:
        _, test_man = _split(cfg)
    if len(test_man) == 0:
        raise DataError("holdout split is empty")
    samples = materialize(test_man, model.config, cfg.prior, None)
    report = evaluate(model, samples)
    print(f"best threshold {report.threshold:.2f} with F1 {report.pixel_f1:.4f}")
    if args.out:
        report.write_prc_csv(os.path.join(_ensure_out(args), "threshold.csv"))
    return 0


def cmd_predict(args) -> int:
    # the checkpoint carries the model config, so a run config is only needed
    # to change the edge-prior settings
    if args.config:
        prior_cfg = load_run_config(args.config, args.set).prior
    elif args.set:
        raise ConfigError("--set needs --config")
    else:
        prior_cfg = PriorConfig()
    model, extra = _load_eval_model(args)
    threshold = args.threshold if args.threshold is not None else extra.get("threshold", 0.5)
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must be in (0, 1), got {threshold}")
    out = _ensure_out(args)
    prior = EdgePrior(prior_cfg) if model.config.input_channels == 4 else None
    for path in args.images:
        image = load_image(path)
        edge = prior.edge_map(image) if prior else None
        x = torch.from_numpy(assemble_input(image, edge)[None])
        prob = predict(model, x).fused_prob[0, 0].numpy()
        stem = os.path.splitext(os.path.basename(path))[0]
        prob16 = np.round(prob * 65535.0).astype(np.uint16)
        Image.fromarray(prob16).save(os.path.join(out, f"{stem}.prob.png"))
        mask = (prob >= threshold).astype(np.uint8)
        write_binary_png(mask, os.path.join(out, f"{stem}.mask.png"))
        overlay = image.copy()
        overlay[mask == 1] = (255, 255, 0)
        Image.fromarray(overlay).save(os.path.join(out, f"{stem}.overlay.png"))
        print(f"{path}: crack share {100.0 * mask.mean():.2f}% at t={threshold:.2f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config, args.set)
    out = _ensure_out(args)
    variants = args.variants.split(",") if args.variants else list(ABLATION_VARIANTS)
    unknown = [v for v in variants if v not in ABLATION_VARIANTS]
    if unknown:
        raise ConfigError(f"unknown ablation variants: {unknown}; known: {list(ABLATION_VARIANTS)}")
    train_man, test_man = _split(cfg)
    if len(train_man) == 0 or len(test_man) == 0:
        raise DataError("ablation needs non-empty train and holdout splits")
    rows = run_ablation(variants, cfg, train_man, test_man, out_dir=out)
    write_ablation_csv(rows, os.path.join(out, "ablation.csv"))
    for row in rows:
        print(f"{row['variant']}: F1 {row['pixel_f1']:.4f} ({row['parameters']} params)")
    return 0


def cmd_crosseval(args) -> int:
    cfg = load_run_config(args.config, args.set)
    if not args.pair:
        raise ConfigError("crosseval needs at least one --pair NAME CHECKPOINT DATAROOT")
    out = _ensure_out(args)
    models, test_sets = {}, {}
    for name, ckpt_path, root in args.pair:
        model, _ = load_checkpoint(ckpt_path)
        models[name] = model
        data_cfg = dataclasses.replace(cfg.data, root=root)
        manifest_path = os.path.join(root, "manifest.json")
        manifest = Manifest.load(manifest_path) if os.path.isfile(manifest_path) else scan_dataset(data_cfg)
        _, test_man = split_holdout(manifest, cfg.data.split_fraction, cfg.data.split_seed)
        if len(test_man) == 0:
            raise DataError(f"dataset {name} has an empty holdout split")
        test_sets[name] = materialize(test_man, model.config, cfg.prior, None)
    grid = cross_evaluate(models, test_sets)
    write_cross_csv(grid, os.path.join(out, "cross.csv"))
    for m_name, row in grid.items():
        for d_name, report in row.items():
            print(f"{m_name} on {d_name}: F1 {report.pixel_f1:.4f}")
    return 0


def cmd_report(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = _ensure_out(args)
    rows = []
    fig, ax = plt.subplots(figsize=(6, 5))
    for run_dir in args.run:
        name = os.path.basename(os.path.normpath(run_dir))
        metrics_path = os.path.join(run_dir, "metrics.csv")
        if os.path.isfile(metrics_path):
            with open(metrics_path, newline="", encoding="utf-8") as fh:
                for row in csv.DictReader(fh):
                    rows.append({"run": name, **row})
        prc_path = os.path.join(run_dir, "prc.csv")
        if os.path.isfile(prc_path):
            with open(prc_path, newline="", encoding="utf-8") as fh:
                pts = [(float(r["recall"]), float(r["precision"])) for r in csv.DictReader(fh)]
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], label=name)
    if not rows:
        raise DataError(f"no metrics.csv found under {args.run}")
    with open(os.path.join(out, "report.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(os.path.join(out, "pr_curves.png"), dpi=120)
    plt.close(fig)
    print(f"report for {len(rows)} run(s) written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        p.add_argument("--config", required=needs_config, help="run config JSON")
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. train.epochs=3")

    p = sub.add_parser("synth", help="generate a synthetic crack corpus")
    common(p, needs_config=False)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--style", choices=STYLES, default="pavement-like")
    p.add_argument("--fg", type=float, default=5.0, help="target crack share in percent")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="dataset summary and class balance")
    common(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("edges", help="compute and store edge maps")
    common(p)
    p.set_defaults(func=cmd_edges)

    p = sub.add_parser("train", help="train on the non-holdout split")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on the holdout split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", help="explicit test manifest JSON instead of re-splitting")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("threshold", help="sweep thresholds and report the best")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_threshold)

    p = sub.add_parser("predict", help="probability, mask, and overlay maps for images")
    common(p, needs_config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--images", nargs="+", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="train and score ablation variants")
    common(p)
    p.add_argument("--variants", help="comma-separated variant names (default: all)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("crosseval", help="score checkpoints across datasets")
    common(p)
    p.add_argument("--pair", nargs=3, action="append", metavar=("NAME", "CKPT", "ROOT"),
                   help="model name, checkpoint path, dataset root (repeatable)")
    p.set_defaults(func=cmd_crosseval)

    p = sub.add_parser("report", help="consolidate run outputs into one report")
    common(p, needs_config=False)
    p.add_argument("--run", nargs="+", required=True, help="run directories to gather")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return int(args.func(args) or 0)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
