"""Training loop, evaluation runner, cross-dataset grid, and ablation registry."""
from __future__ import annotations

import copy
import csv
import logging
import math
import os
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .config import (
    ConfigError,
    DataError,
    DivergenceError,
    LossConfig,
    ModelConfig,
    RunConfig,
    TrainConfig,
    default_scale_weights,
)
from .datapipe import Manifest, augment_sample, batches, load_edge, load_image, load_mask
from .losses import median_frequency_weights, total_loss
from .metrics import MetricReport, score_maps
from .model import SCNet, init_weights, parameter_count, predict, save_checkpoint
from .prior import EdgePrior, assemble_input

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("iter", "loss_total", "loss_focal", "loss_iou")


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    iterations: int = 0
    checkpoint_path: str | None = None
    stopped_early: bool = False
    best_val_f1: float | None = None


def materialize(
    manifest: Manifest,
    model_cfg: ModelConfig,
    prior_cfg,
    augment_cfg=None,
    seed: int | None = None,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Turn manifest records into (input CHW float32, target HW uint8) pairs.

    Precomputed edge maps ride through the geometric augmentation jointly
    with image and mask; computed edge maps (classical or learned) are
    instead derived from each augmented crop, since detection does not
    commute with resampling. A 3-channel model skips the edge prior entirely.
    """
    if len(manifest) == 0:
        raise DataError("no samples to materialize")
    needs_edge = model_cfg.input_channels == 4
    prior = EdgePrior(prior_cfg) if needs_edge else None
    joint_edges = needs_edge and prior_cfg.mode == "precomputed"
    if seed is None:
        seed = augment_cfg.seed if augment_cfg is not None else 0
    rng = np.random.default_rng(seed)
    out = []
    for rec in manifest:
        image = load_image(rec.image_path)
        mask = load_mask(rec.mask_path)
        if image.shape[:2] != mask.shape:
            raise DataError(
                f"sample {rec.sample_id}: image {image.shape[:2]} and mask {mask.shape} disagree"
            )
        edge = None
        if joint_edges:
            precomputed = load_edge(rec.edge_path) if rec.edge_path else None
            edge = prior.edge_map(image, precomputed)
        sample = (image, mask, edge)
        pieces = (
            augment_sample(sample, augment_cfg, rng)
            if augment_cfg is not None and augment_cfg.enabled
            else [sample]
        )
        for im, mk, ed in pieces:
            if needs_edge and not joint_edges:
                ed = prior.edge_map(im)
            out.append((assemble_input(im, ed if needs_edge else None), mk.astype(np.uint8)))
    return out


def _stack_batch(samples, picks, device):
    shapes = {samples[i][0].shape for i in picks}
    if len(shapes) != 1:
        raise DataError(f"batch mixes input shapes {sorted(shapes)}; crop to a common size")
    x = torch.from_numpy(np.stack([samples[i][0] for i in picks])).to(device)
    y = torch.from_numpy(np.stack([samples[i][1] for i in picks])).to(device)
    return x, y.to(torch.float32).unsqueeze(1)


def write_history_csv(history: list[dict], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        writer.writeheader()
        writer.writerows(history)


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.SGD:
    # classical coupling: the L2 term is added to the gradient, so with zero
    # data gradient one step multiplies each parameter by (1 - lr*wd)
    return torch.optim.SGD(
        params,
        lr=cfg.learning_rate,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )


def train(
    model: SCNet,
    samples: list,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    out_dir: str | None = None,
    val_samples: list | None = None,
    log_every: int = 50,
) -> TrainResult:
    """Seeded SGD training over fixed-size samples.

    Batch order is a pure function of (seed, epoch), losses are recorded per
    iteration, and a non-finite loss aborts with DivergenceError before the
    optimiser can propagate it. With validation samples, training stops once
    the fused F1 has not improved for ``early_stop_patience`` evaluations.
    """
    train_cfg.validate()
    loss_cfg.validate()
    if not samples:
        raise DataError("cannot train on an empty sample list")
    device = torch.device(train_cfg.device)
    torch.manual_seed(train_cfg.seed)
    if train_cfg.deterministic:
        # warn_only because max-unpooling has no registered deterministic kernel;
        # its scatter writes each cell at most once (pool indices are unique),
        # so the op is replay-safe anyway.
        torch.use_deterministic_algorithms(True, warn_only=True)
        warnings.filterwarnings(
            "ignore", message=".*max_unpooling2d_forward_out.*", category=UserWarning
        )
    model.to(device)
    model.train()
    opt = make_optimizer(model.parameters(), train_cfg)
    result = TrainResult()
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    best_f1 = -1.0
    stale = 0
    iteration = 0
    done = False
    for epoch in range(train_cfg.epochs):
        for picks in batches(len(samples), train_cfg.batch_size, train_cfg.seed, epoch):
            x, y = _stack_batch(samples, picks, device)
            output = model(x)
            loss, parts = total_loss(output, y, loss_cfg)
            loss_value = float(loss.detach())
            if not math.isfinite(loss_value):
                raise DivergenceError(
                    f"non-finite loss at iteration {iteration + 1}; "
                    "lower the learning rate or check the data"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            iteration += 1
            result.history.append(
                {
                    "iter": iteration,
                    "loss_total": loss_value,
                    "loss_focal": parts["focal"],
                    "loss_iou": parts["iou"],
                }
            )
            if log_every and iteration % log_every == 0:
                log.info(
                    "iter %d loss %.4f (pixel %.4f region %.4f)",
                    iteration,
                    loss_value,
                    parts["focal"],
                    parts["iou"],
                )
            if train_cfg.max_iterations and iteration >= train_cfg.max_iterations:
                done = True
                break
        if out_dir and (epoch + 1) % train_cfg.checkpoint_every == 0 and not done:
            save_checkpoint(model, os.path.join(out_dir, f"epoch_{epoch + 1:04d}.ckpt"))
        if val_samples and (epoch + 1) % train_cfg.checkpoint_every == 0:
            report = evaluate(model, val_samples)
            result.best_val_f1 = max(best_f1, report.pixel_f1)
            if report.pixel_f1 > best_f1:
                best_f1 = report.pixel_f1
                stale = 0
            else:
                stale += 1
                if stale >= train_cfg.early_stop_patience:
                    result.stopped_early = True
                    done = True
            model.train()
        if done:
            break
    result.iterations = iteration
    if out_dir:
        result.checkpoint_path = os.path.join(out_dir, "model.ckpt")
        save_checkpoint(model, result.checkpoint_path)
        write_history_csv(result.history, os.path.join(out_dir, "history.csv"))
    return result


def evaluate(
    model: SCNet,
    samples: list,
    thresholds=None,
    patch_size: int = 32,
    min_crack_share: float = 0.05,
    detection_share: float = 0.5,
) -> MetricReport:
    """Score the fused probability maps of a sample list."""
    if not samples:
        raise DataError("cannot evaluate on an empty sample list")
    probs, gts = [], []
    for x, y in samples:
        out = predict(model, torch.from_numpy(x[None]))
        probs.append(out.fused_prob[0, 0].cpu().numpy())
        gts.append(y)
    return score_maps(
        probs,
        gts,
        thresholds=thresholds,
        patch_size=patch_size,
        min_crack_share=min_crack_share,
        detection_share=detection_share,
    )


def cross_evaluate(
    models: dict[str, SCNet], test_sets: dict[str, list], thresholds=None
) -> dict[str, dict[str, MetricReport]]:
    """Every model scored on every test set: grid[model_name][dataset_name]."""
    grid: dict[str, dict[str, MetricReport]] = {}
    for m_name, model in models.items():
        grid[m_name] = {}
        for d_name, samples in test_sets.items():
            grid[m_name][d_name] = evaluate(model, samples, thresholds=thresholds)
    return grid


def write_cross_csv(grid: dict[str, dict[str, MetricReport]], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trained_on", "evaluated_on", "threshold", "pixel_f1", "pixel_iou", "auprc"])
        for m_name, row in grid.items():
            for d_name, report in row.items():
                writer.writerow(
                    [m_name, d_name, report.threshold, report.pixel_f1, report.pixel_iou, report.auprc]
                )


# --- ablation registry ------------------------------------------------------

# Ordered registry; the results CSV follows this order exactly.
ABLATION_VARIANTS: dict[str, str] = {
    "full": "attention in encoder and decoder, edge channel, focal + soft-IoU",
    "no_attention": "gates removed everywhere, side taps are channel means",
    "encoder_attention_only": "attention in the encoder only",
    "decoder_attention_only": "attention in the decoder only",
    "scalar_weights": "one learned scalar per gating site instead of attention",
    "rgb_only": "3-channel input, no edge prior",
    "four_scale": "four scales instead of five",
    "loss_focal_only": "no region term",
    "loss_ce_only": "weighted BCE, no region term",
    "loss_ce_softiou": "weighted BCE plus soft-IoU",
    "loss_focal_lovasz": "focal plus Lovasz hinge",
}


def apply_variant(
    name: str, model_cfg: ModelConfig, loss_cfg: LossConfig
) -> tuple[ModelConfig, LossConfig]:
    """Return fresh configs with one named modification applied."""
    m = copy.deepcopy(model_cfg)
    l = copy.deepcopy(loss_cfg)
    if name == "full":
        pass
    elif name == "no_attention":
        m.attention_in_encoder = False
        m.attention_in_decoder = False
    elif name == "encoder_attention_only":
        m.attention_in_decoder = False
    elif name == "decoder_attention_only":
        m.attention_in_encoder = False
    elif name == "scalar_weights":
        m.attention_in_encoder = False
        m.attention_in_decoder = False
        m.use_scalar_weight_variant = True
    elif name == "rgb_only":
        m.input_channels = 3
    elif name == "four_scale":
        m.num_scales = 4
        m.encoder_channels = m.encoder_channels[:4]
        m.convs_per_block = [2, 2, 3, 3]
        l.scale_weights = default_scale_weights(4)
    elif name == "loss_focal_only":
        l.combo = "focal_only"
    elif name == "loss_ce_only":
        l.combo = "ce_only"
    elif name == "loss_ce_softiou":
        l.combo = "ce+softiou"
    elif name == "loss_focal_lovasz":
        l.combo = "focal+lovasz"
    else:
        raise ConfigError(f"unknown ablation variant {name!r}")
    m.validate()
    l.validate()
    return m, l


def run_ablation(
    variants: list[str],
    base: RunConfig,
    train_manifest: Manifest,
    test_manifest: Manifest,
    out_dir: str | None = None,
) -> list[dict]:
    """Train and score each variant from the same data and seed; one row each."""
    rows = []
    for name in variants:
        m_cfg, l_cfg = apply_variant(name, base.model, base.loss)
        train_samples = materialize(
            train_manifest, m_cfg, base.prior, base.data.augment if base.data.augment.enabled else None
        )
        test_samples = materialize(test_manifest, m_cfg, base.prior, None)
        model = SCNet(m_cfg)
        init_weights(model, seed=base.train.seed)
        variant_dir = os.path.join(out_dir, name) if out_dir else None
        result = train(model, train_samples, base.train, l_cfg, out_dir=variant_dir)
        report = evaluate(model, test_samples)
        rows.append(
            {
                "variant": name,
                "parameters": parameter_count(model),
                "iterations": result.iterations,
                "threshold": report.threshold,
                "pixel_precision": report.pixel_precision,
                "pixel_recall": report.pixel_recall,
                "pixel_f1": report.pixel_f1,
                "pixel_iou": report.pixel_iou,
                "region_f1": report.region_f1,
                "auprc": report.auprc,
            }
        )
        log.info("variant %s: f1 %.4f at t=%.2f", name, report.pixel_f1, report.threshold)
    return rows


def write_ablation_csv(rows: list[dict], path: str) -> None:
    if not rows:
        raise ValueError("no ablation rows to write")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def derive_class_weights(manifest: Manifest, loss_cfg: LossConfig) -> LossConfig:
    """For BCE combos with default weights, fill in median-frequency weights."""
    if loss_cfg.combo.startswith("ce") and tuple(loss_cfg.class_weights) == (1.0, 1.0):
        from .datapipe import imbalance_stats

        fg, bg = imbalance_stats(manifest)
        if fg > 0 and bg > 0:
            loss_cfg = replace(loss_cfg, class_weights=median_frequency_weights(fg, bg))
    return loss_cfg
