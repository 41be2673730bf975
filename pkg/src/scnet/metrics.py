"""Evaluation: pixel and region scores, PR sweeps, best-threshold search.

All pixel metrics micro-aggregate: confusion counts are pooled over every
map first and ratios are taken once at the end. Zero denominators yield 0
rather than an error so degenerate maps (no cracks, no predictions) stay
comparable.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


def _as_binary(arr, name: str) -> np.ndarray:
    arr = np.asarray(arr)
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{name} must contain only 0 and 1")
    return arr.astype(np.uint8)


def _flatten_pairs(probs, gts) -> tuple[np.ndarray, np.ndarray]:
    """Accept a map or a list of maps; return matched flat vectors."""
    if isinstance(probs, np.ndarray) and probs.ndim <= 2:
        probs, gts = [probs], [gts]
    elif not isinstance(probs, (list, tuple)):
        probs, gts = [probs], [gts]
    if len(probs) != len(gts):
        raise ValueError(f"{len(probs)} probability maps but {len(gts)} targets")
    flat_p, flat_g = [], []
    for p, g in zip(probs, gts):
        p = np.asarray(p, dtype=np.float64)
        g = _as_binary(g, "target")
        if p.shape != g.shape:
            raise ValueError(f"map shape {p.shape} != target shape {g.shape}")
        if p.size and (p.min() < 0 or p.max() > 1):
            raise ValueError("probabilities must lie in [0, 1]")
        flat_p.append(p.reshape(-1))
        flat_g.append(g.reshape(-1))
    if not flat_p:
        raise ValueError("no maps given")
    return np.concatenate(flat_p), np.concatenate(flat_g)


def confusion_counts(pred, gt) -> tuple[int, int, int, int]:
    """Pooled (tp, fp, fn, tn) over one binary map or a list of them."""
    if not isinstance(pred, (list, tuple)):
        pred, gt = [pred], [gt]
    tp = fp = fn = tn = 0
    for p, g in zip(pred, gt, strict=True):
        p = _as_binary(p, "prediction")
        g = _as_binary(g, "target")
        if p.shape != g.shape:
            raise ValueError(f"prediction shape {p.shape} != target shape {g.shape}")
        tp += int(np.sum((p == 1) & (g == 1)))
        fp += int(np.sum((p == 1) & (g == 0)))
        fn += int(np.sum((p == 0) & (g == 1)))
        tn += int(np.sum((p == 0) & (g == 0)))
    return tp, fp, fn, tn


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def pixel_scores(counts: tuple[int, int, int, int]) -> tuple[float, float, float, float]:
    """(precision, recall, f1, iou) from pooled confusion counts."""
    tp, fp, fn, _ = counts
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2 * precision * recall, precision + recall)
    iou = _ratio(tp, tp + fp + fn)
    return precision, recall, f1, iou


def default_threshold_grid() -> np.ndarray:
    return np.array([i / 100 for i in range(1, 100)], dtype=np.float64)


def threshold_sweep(probs, gts, thresholds=None) -> np.ndarray:
    """Rows of (threshold, precision, recall, f1); prediction is prob >= t."""
    if thresholds is None:
        thresholds = default_threshold_grid()
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if thresholds.size == 0:
        raise ValueError("threshold grid is empty")
    if thresholds.min() <= 0.0 or thresholds.max() >= 1.0:
        raise ValueError("thresholds must lie strictly inside (0, 1)")
    if thresholds.size > 1 and np.any(np.diff(thresholds) <= 0):
        raise ValueError("thresholds must be strictly increasing")
    p, g = _flatten_pairs(probs, gts)
    order = np.argsort(p, kind="stable")
    p_sorted = p[order]
    g_sorted = g[order].astype(np.int64)
    total_pos = int(g_sorted.sum())
    total = p_sorted.size
    # cumulative positives strictly below each sorted position
    cum_pos = np.concatenate([[0], np.cumsum(g_sorted)])
    rows = np.empty((thresholds.size, 4), dtype=np.float64)
    for i, t in enumerate(thresholds):
        k = int(np.searchsorted(p_sorted, t, side="left"))  # count of probs < t
        pred_count = total - k
        tp = total_pos - int(cum_pos[k])
        fp = pred_count - tp
        fn = total_pos - tp
        precision = _ratio(tp, tp + fp)
        recall = _ratio(tp, tp + fn)
        f1 = _ratio(2 * precision * recall, precision + recall)
        rows[i] = (t, precision, recall, f1)
    return rows


def pr_curve(probs, gts, thresholds=None) -> np.ndarray:
    """(recall, precision) pairs in threshold order."""
    sweep = threshold_sweep(probs, gts, thresholds)
    return sweep[:, [2, 1]]


def auprc(points: np.ndarray) -> float:
    """Area under a PR curve given (recall, precision) points.

    Points are sorted by recall and anchored at recall 0 with the first
    point's precision; the area is the trapezoid sum over recall.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2 or points.shape[0] < 2:
        raise ValueError("expected at least two (recall, precision) pairs")
    order = np.argsort(points[:, 0], kind="stable")
    recall = points[order, 0]
    precision = points[order, 1]
    recall = np.concatenate([[0.0], recall])
    precision = np.concatenate([[precision[0]], precision])
    return float(np.trapezoid(precision, recall))


def iterative_threshold(probs, gts, thresholds=None) -> tuple[float, float]:
    """Best (threshold, f1) over the grid; ties go to the smallest threshold."""
    sweep = threshold_sweep(probs, gts, thresholds)
    best = int(np.argmax(sweep[:, 3]))  # argmax returns the first maximum
    return float(sweep[best, 0]), float(sweep[best, 3])


def region_counts(
    pred,
    gt,
    patch_size: int = 32,
    min_crack_share: float = 0.05,
    detection_share: float = 0.5,
) -> tuple[int, int, int, int]:
    """Patch-level confusion counts, pooled over one map or a list.

    The image is tiled by ``patch_size`` squares (edge patches keep their
    actual, smaller area). A patch counts as cracked when its crack share
    reaches ``min_crack_share``; a cracked patch is detected when the
    prediction covers ``detection_share`` of its crack pixels. Uncracked
    patches use the same share rule on predicted pixels to call false
    positives.
    """
    if not isinstance(pred, (list, tuple)):
        pred, gt = [pred], [gt]
    tp = fp = fn = tn = 0
    for p_map, g_map in zip(pred, gt, strict=True):
        p_map = _as_binary(p_map, "prediction")
        g_map = _as_binary(g_map, "target")
        if p_map.shape != g_map.shape:
            raise ValueError(f"prediction shape {p_map.shape} != target shape {g_map.shape}")
        h, w = g_map.shape
        if patch_size > h or patch_size > w:
            raise ValueError(f"patch size {patch_size} exceeds image size {(h, w)}")
        for y in range(0, h, patch_size):
            for x in range(0, w, patch_size):
                g_patch = g_map[y : y + patch_size, x : x + patch_size]
                p_patch = p_map[y : y + patch_size, x : x + patch_size]
                area = g_patch.size
                crack_px = int(g_patch.sum())
                if crack_px >= min_crack_share * area:
                    hit = int((p_patch & g_patch).sum())
                    if hit >= detection_share * crack_px:
                        tp += 1
                    else:
                        fn += 1
                else:
                    if int(p_patch.sum()) >= min_crack_share * area:
                        fp += 1
                    else:
                        tn += 1
    return tp, fp, fn, tn


def region_scores(
    pred,
    gt,
    patch_size: int = 32,
    min_crack_share: float = 0.05,
    detection_share: float = 0.5,
) -> tuple[float, float, float]:
    """(precision, recall, f1) over patches."""
    tp, fp, fn, _ = region_counts(pred, gt, patch_size, min_crack_share, detection_share)
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2 * precision * recall, precision + recall)
    return precision, recall, f1


def error_breakdown(counts_by_name: dict[str, tuple[int, int, int, int]]) -> list[dict]:
    """Each entry's slice of the pooled TP, FP, and FN mass, in percent.

    For every count type the shares are taken across entries, so a single
    entry owns 100% of each and identical entries split evenly. Shares are
    rounded to two decimals; a count type nobody has yields all-zero shares.
    """
    names = list(counts_by_name)
    totals = [sum(counts_by_name[n][i] for n in names) for i in range(3)]
    rows = []
    for name in names:
        tp, fp, fn, tn = counts_by_name[name]
        rows.append(
            {
                "name": name,
                "tp": tp,
                "fp": fp,
                "fn": fn,
                "tn": tn,
                "tp_share_pct": round(100.0 * _ratio(tp, totals[0]), 2),
                "fp_share_pct": round(100.0 * _ratio(fp, totals[1]), 2),
                "fn_share_pct": round(100.0 * _ratio(fn, totals[2]), 2),
            }
        )
    return rows


@dataclass
class MetricReport:
    """Everything one evaluation produces, plus CSV writers."""

    threshold: float
    pixel_precision: float
    pixel_recall: float
    pixel_f1: float
    pixel_iou: float
    region_precision: float
    region_recall: float
    region_f1: float
    auprc: float
    tp: int
    fp: int
    fn: int
    tn: int
    sweep: np.ndarray = field(repr=False)

    def write_metrics_csv(self, path: str) -> None:
        fields = [
            "threshold",
            "pixel_precision",
            "pixel_recall",
            "pixel_f1",
            "pixel_iou",
            "region_precision",
            "region_recall",
            "region_f1",
            "auprc",
            "tp",
            "fp",
            "fn",
            "tn",
        ]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(fields)
            writer.writerow([getattr(self, f) for f in fields])

    def write_prc_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold", "precision", "recall", "f1"])
            for t, p, r, f1 in self.sweep:
                writer.writerow([f"{t:.2f}", repr(float(p)), repr(float(r)), repr(float(f1))])


def score_maps(
    probs,
    gts,
    thresholds=None,
    patch_size: int = 32,
    min_crack_share: float = 0.05,
    detection_share: float = 0.5,
) -> MetricReport:
    """Full evaluation of probability maps against binary targets.

    Finds the best threshold on the grid, binarises at it, and reports pooled
    pixel scores, patch scores, the sweep itself, and its AUPRC.
    """
    if not isinstance(probs, (list, tuple)):
        probs, gts = [probs], [gts]
    sweep = threshold_sweep(probs, gts, thresholds)
    best = int(np.argmax(sweep[:, 3]))
    t_star = float(sweep[best, 0])
    preds = [(np.asarray(p, dtype=np.float64) >= t_star).astype(np.uint8) for p in probs]
    gts_b = [_as_binary(g, "target") for g in gts]
    counts = confusion_counts(preds, gts_b)
    precision, recall, f1, iou = pixel_scores(counts)
    r_precision, r_recall, r_f1 = region_scores(
        preds, gts_b, patch_size, min_crack_share, detection_share
    )
    area = auprc(sweep[:, [2, 1]])
    return MetricReport(
        threshold=t_star,
        pixel_precision=precision,
        pixel_recall=recall,
        pixel_f1=f1,
        pixel_iou=iou,
        region_precision=r_precision,
        region_recall=r_recall,
        region_f1=r_f1,
        auprc=area,
        tp=counts[0],
        fp=counts[1],
        fn=counts[2],
        tn=counts[3],
        sweep=sweep,
    )
