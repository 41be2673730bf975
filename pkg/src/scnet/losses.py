"""Loss functions: focal, soft-IoU, Lovasz hinge, weighted BCE, and combos.

Everything takes logits except the soft-IoU term, which works on
probabilities. Targets must be binary maps. ``reduction="sum"`` accumulates
per-pixel losses over the whole map (the default training behaviour);
``"mean"`` divides by the pixel count, which only rescales gradients.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F

from .config import ConfigError, LossConfig
from .model import ForwardOutput


def _check_binary(target: torch.Tensor) -> None:
    if not torch.all((target == 0) | (target == 1)):
        raise ValueError("target must be a binary map of zeros and ones")


def _reduce(per_pixel: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "sum":
        return per_pixel.sum()
    if reduction == "mean":
        return per_pixel.mean()
    raise ConfigError(f"unknown reduction {reduction!r}")


def focal_loss(
    logits: torch.Tensor,
    target: torch.Tensor,
    alpha: float = 1.0,
    gamma: float = 2.0,
    reduction: str = "sum",
) -> torch.Tensor:
    """Focal loss over logits, numerically stable at any logit magnitude.

    Per pixel: alpha * (1-p)^gamma * -log(p) for crack pixels and
    alpha * p^gamma * -log(1-p) for background, with p = sigmoid(logit).
    log(p) and log(1-p) are taken via logsigmoid so extreme logits never
    produce inf or nan; gamma = 0 reduces to plain BCE.
    """
    _check_binary(target)
    if logits.shape != target.shape:
        raise ValueError(f"logit shape {tuple(logits.shape)} != target {tuple(target.shape)}")
    log_p = F.logsigmoid(logits)
    log_1mp = F.logsigmoid(-logits)
    pos = torch.exp(gamma * log_1mp) * (-log_p)
    neg = torch.exp(gamma * log_p) * (-log_1mp)
    per_pixel = alpha * torch.where(target > 0.5, pos, neg)
    return _reduce(per_pixel, reduction)


def total_focal_loss(
    fused_logit: torch.Tensor,
    scale_logits: list[torch.Tensor],
    target: torch.Tensor,
    scale_weights: list[float],
    alpha: float = 1.0,
    gamma: float = 2.0,
    reduction: str = "sum",
) -> torch.Tensor:
    """Deeply supervised focal total: fused loss plus weighted per-scale losses."""
    if len(scale_logits) != len(scale_weights):
        raise ValueError(
            f"{len(scale_logits)} scale maps but {len(scale_weights)} weights"
        )
    total = focal_loss(fused_logit, target, alpha, gamma, reduction)
    for weight, logit in zip(scale_weights, scale_logits):
        total = total + weight * focal_loss(logit, target, alpha, gamma, reduction)
    return total


def soft_iou_loss(probs: torch.Tensor, target: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """One minus the soft intersection-over-union of a probability map.

    intersection = sum(p * y), union = sum(p) + sum(y) - intersection.
    The union is floored at ``eps`` purely to guard the all-zero corner, so
    any ordinary input gets the exact ratio: an empty target gives loss 1 and
    a perfect binary prediction gives loss 0.
    """
    _check_binary(target)
    if probs.shape != target.shape:
        raise ValueError(f"prob shape {tuple(probs.shape)} != target {tuple(target.shape)}")
    if torch.any(probs < 0) or torch.any(probs > 1):
        raise ValueError("soft-IoU expects probabilities in [0, 1]")
    target = target.to(probs.dtype)
    intersection = (probs * target).sum()
    union = probs.sum() + target.sum() - intersection
    return 1.0 - intersection / torch.clamp(union, min=eps)


def lovasz_hinge_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Lovasz extension of the Jaccard loss over hinge errors.

    Signs are +1 for crack and -1 for background; errors 1 - sign * logit are
    sorted descending and dotted with the gradient of the Jaccard set
    function along that permutation. The whole input is treated as one pixel
    set. Perfect separation with margin >= 1 gives exactly zero.
    """
    _check_binary(target)
    if logits.shape != target.shape:
        raise ValueError(f"logit shape {tuple(logits.shape)} != target {tuple(target.shape)}")
    flat_logits = logits.reshape(-1)
    flat_target = target.reshape(-1).to(logits.dtype)
    signs = 2.0 * flat_target - 1.0
    errors = 1.0 - signs * flat_logits
    errors_sorted, order = torch.sort(errors, descending=True)
    sorted_target = flat_target[order]
    gts = sorted_target.sum()
    intersection = gts - sorted_target.cumsum(0)
    union = gts + (1.0 - sorted_target).cumsum(0)
    jaccard = 1.0 - intersection / union
    if jaccard.numel() > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return torch.dot(F.relu(errors_sorted), jaccard)


def weighted_bce_loss(
    logits: torch.Tensor,
    target: torch.Tensor,
    class_weights: tuple[float, float] = (1.0, 1.0),
    reduction: str = "sum",
) -> torch.Tensor:
    """Binary cross-entropy with per-class weights (crack weight first)."""
    _check_binary(target)
    if logits.shape != target.shape:
        raise ValueError(f"logit shape {tuple(logits.shape)} != target {tuple(target.shape)}")
    w_fg, w_bg = class_weights
    if w_fg <= 0 or w_bg <= 0:
        raise ValueError("class weights must be positive")
    pos = -F.logsigmoid(logits)
    neg = -F.logsigmoid(-logits)
    per_pixel = torch.where(target > 0.5, w_fg * pos, w_bg * neg)
    return _reduce(per_pixel, reduction)


def median_frequency_weights(fg_share: float, bg_share: float) -> tuple[float, float]:
    """Class weights from class shares: median frequency over own frequency."""
    if fg_share <= 0 or bg_share <= 0:
        raise ValueError("class shares must be positive to derive weights")
    med = (fg_share + bg_share) / 2.0  # median of two values
    return med / fg_share, med / bg_share


def _total_ce(
    output: ForwardOutput, target: torch.Tensor, cfg: LossConfig
) -> torch.Tensor:
    total = weighted_bce_loss(output.fused_logit, target, cfg.class_weights, cfg.reduction)
    for weight, logit in zip(cfg.scale_weights, output.scale_logits):
        total = total + weight * weighted_bce_loss(logit, target, cfg.class_weights, cfg.reduction)
    return total


def total_loss(
    output: ForwardOutput, target: torch.Tensor, cfg: LossConfig
) -> tuple[torch.Tensor, dict[str, float]]:
    """Combine the configured loss terms.

    Returns the scalar loss and a breakdown dict with the pixel term under
    "focal" and the region term (soft-IoU or Lovasz, zero when absent) under
    "iou", matching the training history columns.
    """
    cfg.validate()
    if len(output.scale_logits) != len(cfg.scale_weights):
        raise ValueError(
            f"model emits {len(output.scale_logits)} scales, "
            f"loss config has {len(cfg.scale_weights)} weights"
        )
    if cfg.combo in ("focal+softiou", "focal_only", "focal+lovasz"):
        pixel = total_focal_loss(
            output.fused_logit,
            output.scale_logits,
            target,
            cfg.scale_weights,
            cfg.alpha,
            cfg.gamma,
            cfg.reduction,
        )
    elif cfg.combo in ("ce_only", "ce+softiou"):
        pixel = _total_ce(output, target, cfg)
    else:
        raise ConfigError(f"unknown loss combo {cfg.combo!r}")

    if cfg.combo in ("focal+softiou", "ce+softiou"):
        region = soft_iou_loss(output.fused_prob, target, cfg.eps)
    elif cfg.combo == "focal+lovasz":
        region = lovasz_hinge_loss(output.fused_logit, target)
    else:
        region = None

    if region is None:
        total = pixel
        parts = {"focal": float(pixel.detach()), "iou": 0.0}
    else:
        total = pixel + cfg.iou_weight * region
        parts = {"focal": float(pixel.detach()), "iou": float(region.detach())}
    return total, parts
