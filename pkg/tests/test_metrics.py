import csv

import numpy as np
import pytest

from scnet.metrics import (
    auprc,
    confusion_counts,
    default_threshold_grid,
    error_breakdown,
    iterative_threshold,
    pixel_scores,
    pr_curve,
    region_counts,
    region_scores,
    score_maps,
    threshold_sweep,
)

from conftest import rand_probs_gt


def brute_sweep(probs, gts, thresholds):
    """Reference implementation: binarise at every threshold and count."""
    p = np.concatenate([np.asarray(x, dtype=np.float64).ravel() for x in probs])
    g = np.concatenate([np.asarray(x).ravel() for x in gts]).astype(np.int64)
    rows = []
    for t in thresholds:
        pred = p >= t
        tp = int(np.sum(pred & (g == 1)))
        fp = int(np.sum(pred & (g == 0)))
        fn = int(np.sum(~pred & (g == 1)))
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        rows.append((t, prec, rec, f1))
    return np.array(rows, dtype=np.float64)


# --- confusion counts and pixel scores --------------------------------------


def test_confusion_counts_hand_example():
    pred = np.array([[1, 0], [0, 0]])
    gt = np.array([[1, 1], [0, 0]])
    assert confusion_counts(pred, gt) == (1, 0, 1, 2)


def test_confusion_counts_pool_over_list():
    a = (np.ones((2, 2), dtype=np.uint8), np.ones((2, 2), dtype=np.uint8))
    b = (np.zeros((3, 3), dtype=np.uint8), np.zeros((3, 3), dtype=np.uint8))
    tp, fp, fn, tn = confusion_counts([a[0], b[0]], [a[1], b[1]])
    assert (tp, fp, fn, tn) == (4, 0, 0, 9)


def test_confusion_counts_validation():
    with pytest.raises(ValueError, match="0 and 1"):
        confusion_counts(np.array([2]), np.array([1]))
    with pytest.raises(ValueError, match="shape"):
        confusion_counts(np.zeros((2, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        confusion_counts([np.zeros((2, 2))], [np.zeros((2, 2)), np.zeros((2, 2))])


def test_pixel_scores_hand_example():
    precision, recall, f1, iou = pixel_scores((1, 0, 1, 2))
    assert precision == 1.0
    assert recall == 0.5
    assert f1 == pytest.approx(2 / 3)
    assert iou == 0.5


def test_pixel_scores_zero_denominators():
    assert pixel_scores((0, 0, 0, 4)) == (0.0, 0.0, 0.0, 0.0)
    # no true positives but predictions exist: precision well-defined at 0
    assert pixel_scores((0, 3, 2, 1)) == (0.0, 0.0, 0.0, 0.0)


# --- threshold sweep ---------------------------------------------------------


def test_default_grid():
    grid = default_threshold_grid()
    assert grid.size == 99
    assert grid[0] == 0.01 and grid[-1] == 0.99
    assert np.all(np.diff(grid) > 0)


def test_sweep_validates_grid():
    p, g = np.array([0.5]), np.array([1])
    with pytest.raises(ValueError, match="empty"):
        threshold_sweep(p, g, thresholds=[])
    with pytest.raises(ValueError, match="inside"):
        threshold_sweep(p, g, thresholds=[0.0, 0.5])
    with pytest.raises(ValueError, match="inside"):
        threshold_sweep(p, g, thresholds=[0.5, 1.0])
    with pytest.raises(ValueError, match="increasing"):
        threshold_sweep(p, g, thresholds=[0.5, 0.5])
    with pytest.raises(ValueError, match="increasing"):
        threshold_sweep(p, g, thresholds=[0.6, 0.4])


def test_sweep_validates_inputs():
    with pytest.raises(ValueError, match="probabilities"):
        threshold_sweep(np.array([1.2]), np.array([1]))
    with pytest.raises(ValueError, match="shape"):
        threshold_sweep(np.zeros((2, 2)), np.zeros((2, 3)))


def test_sweep_threshold_is_inclusive():
    # a probability exactly on the threshold counts as predicted crack
    probs = np.array([0.5, 0.4])
    gts = np.array([1, 0])
    row = threshold_sweep(probs, gts, thresholds=[0.5])[0]
    assert tuple(row) == (0.5, 1.0, 1.0, 1.0)


@pytest.mark.parametrize("quantized", [False, True])
def test_sweep_matches_brute_force(quantized):
    rng = np.random.default_rng(42 + quantized)
    grid = default_threshold_grid()
    for _ in range(20):
        probs, gt = rand_probs_gt(rng, shape=(16, 16), quantized=quantized)
        fast = threshold_sweep(probs, gt, grid)
        slow = brute_sweep([probs], [gt], grid)
        assert np.max(np.abs(fast - slow)) <= 1e-12


def test_sweep_matches_brute_force_pooled():
    rng = np.random.default_rng(7)
    probs = [rand_probs_gt(rng)[0] for _ in range(3)]
    gts = [rand_probs_gt(rng)[1] for _ in range(3)]
    grid = default_threshold_grid()
    fast = threshold_sweep(probs, gts, grid)
    slow = brute_sweep(probs, gts, grid)
    assert np.max(np.abs(fast - slow)) <= 1e-12


def test_sweep_recall_never_increases():
    rng = np.random.default_rng(3)
    probs, gt = rand_probs_gt(rng, shape=(32, 32))
    recall = threshold_sweep(probs, gt)[:, 2]
    assert np.all(np.diff(recall) <= 0)


def test_pr_curve_columns():
    rng = np.random.default_rng(4)
    probs, gt = rand_probs_gt(rng)
    sweep = threshold_sweep(probs, gt)
    curve = pr_curve(probs, gt)
    assert np.array_equal(curve[:, 0], sweep[:, 2])  # recall first
    assert np.array_equal(curve[:, 1], sweep[:, 1])


# --- area under the PR curve -------------------------------------------------


def test_auprc_triangle():
    assert auprc(np.array([[0.0, 1.0], [1.0, 0.0]])) == pytest.approx(0.5)


def test_auprc_constant_precision():
    pts = np.array([[0.5, 0.8], [1.0, 0.8]])
    assert auprc(pts) == pytest.approx(0.8)


def test_auprc_sorts_by_recall():
    pts = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert auprc(pts) == pytest.approx(0.5)


def test_auprc_needs_two_points():
    with pytest.raises(ValueError):
        auprc(np.array([[0.5, 0.5]]))
    with pytest.raises(ValueError):
        auprc(np.array([0.5, 0.5]))


# --- best threshold ----------------------------------------------------------


def test_iterative_threshold_hand_case():
    probs = np.array([0.2, 0.6, 0.8])
    gt = np.array([0, 1, 1])
    t, f1 = iterative_threshold(probs, gt)
    # f1 hits 1.0 once the background pixel at 0.2 drops out; smallest such
    # grid point is 0.21
    assert t == pytest.approx(0.21)
    assert f1 == pytest.approx(1.0)


def test_iterative_threshold_all_background():
    t, f1 = iterative_threshold(np.array([0.3, 0.7]), np.array([0, 0]))
    assert t == pytest.approx(0.01)  # tie on f1=0 goes to the smallest threshold
    assert f1 == 0.0


def test_iterative_threshold_beats_grid():
    rng = np.random.default_rng(5)
    for _ in range(10):
        probs, gt = rand_probs_gt(rng, quantized=True)
        t, f1 = iterative_threshold(probs, gt)
        sweep = threshold_sweep(probs, gt)
        assert f1 >= sweep[:, 3].max() - 1e-15
        earlier = sweep[sweep[:, 3] >= f1 - 1e-15][0, 0]
        assert t == pytest.approx(earlier)


# --- patch-level scoring -----------------------------------------------------


def _map_with(n_crack, size=32):
    g = np.zeros((size, size), dtype=np.uint8)
    g.reshape(-1)[:n_crack] = 1
    return g


def test_region_crack_share_boundary():
    # 32x32 patch needs ceil(0.05 * 1024) = 51.2 crack pixels, so 52 qualifies
    pred = np.zeros((32, 32), dtype=np.uint8)
    assert region_counts(pred, _map_with(52)) == (0, 0, 1, 0)
    assert region_counts(pred, _map_with(51)) == (0, 0, 0, 1)


def test_region_share_boundary_is_inclusive():
    # patch of 100 pixels: exactly 5 crack pixels meets the 5% rule
    gt = _map_with(5, size=10)
    none = np.zeros_like(gt)
    assert region_counts(none, gt, patch_size=10) == (0, 0, 1, 0)
    assert region_counts(none, _map_with(4, size=10), patch_size=10) == (0, 0, 0, 1)


def test_region_detection_boundary_is_inclusive():
    gt = _map_with(6, size=10)
    half = _map_with(3, size=10)  # covers exactly half the crack pixels
    assert region_counts(half, gt, patch_size=10) == (1, 0, 0, 0)
    under = _map_with(2, size=10)
    assert region_counts(under, gt, patch_size=10) == (0, 0, 1, 0)


def test_region_false_positive_mirror_rule():
    gt = np.zeros((10, 10), dtype=np.uint8)
    assert region_counts(_map_with(5, size=10), gt, patch_size=10) == (0, 1, 0, 0)
    assert region_counts(_map_with(4, size=10), gt, patch_size=10) == (0, 0, 0, 1)


def test_region_ragged_edges_use_actual_area():
    gt = np.zeros((40, 40), dtype=np.uint8)
    # 4 crack pixels in the bottom-right 8x8 corner patch: 4 >= 0.05 * 64
    gt[32:34, 32:34] = 1
    pred = gt.copy()
    tp, fp, fn, tn = region_counts(pred, gt, patch_size=32)
    assert (tp, fp, fn, tn) == (1, 0, 0, 3)  # 4 patches in total

    # the same 4 pixels inside the full 32x32 patch fall below its 5% bar
    gt_main = np.zeros((40, 40), dtype=np.uint8)
    gt_main[:2, :2] = 1
    assert region_counts(gt_main.copy(), gt_main, patch_size=32) == (0, 0, 0, 4)


def test_region_perfect_prediction():
    rng = np.random.default_rng(6)
    gt = (rng.random((64, 64)) < 0.2).astype(np.uint8)
    tp, fp, fn, tn = region_counts(gt.copy(), gt)
    assert fp == 0 and fn == 0
    assert tp + tn == 4
    assert region_scores(gt.copy(), gt) == (1.0, 1.0, 1.0)


def test_region_patch_larger_than_image():
    with pytest.raises(ValueError, match="patch size"):
        region_counts(np.zeros((16, 16)), np.zeros((16, 16)), patch_size=32)


def test_region_pools_over_list():
    gt = _map_with(52)
    counts = region_counts([gt.copy(), gt.copy()], [gt, gt])
    assert counts == (2, 0, 0, 0)


def test_region_scores_zero_when_empty():
    empty = np.zeros((32, 32), dtype=np.uint8)
    assert region_scores(empty, empty) == (0.0, 0.0, 0.0)


# --- per-model error shares --------------------------------------------------


def test_error_breakdown_single_model_owns_everything():
    rows = error_breakdown({"only": (3, 2, 5, 90)})
    assert rows[0]["tp_share_pct"] == 100.0
    assert rows[0]["fp_share_pct"] == 100.0
    assert rows[0]["fn_share_pct"] == 100.0


def test_error_breakdown_identical_models_split_evenly():
    rows = error_breakdown({"a": (4, 2, 6, 88), "b": (4, 2, 6, 88)})
    for row in rows:
        assert row["tp_share_pct"] == 50.0
        assert row["fp_share_pct"] == 50.0
        assert row["fn_share_pct"] == 50.0


def test_error_breakdown_shares_sum_to_100():
    rng = np.random.default_rng(8)
    counts = {f"m{i}": tuple(int(x) for x in rng.integers(1, 500, size=4)) for i in range(5)}
    rows = error_breakdown(counts)
    for key in ("tp_share_pct", "fp_share_pct", "fn_share_pct"):
        assert sum(r[key] for r in rows) == pytest.approx(100.0, abs=0.011)


def test_error_breakdown_zero_total_gives_zero_shares():
    rows = error_breakdown({"a": (5, 0, 3, 10), "b": (5, 0, 3, 10)})
    assert all(r["fp_share_pct"] == 0.0 for r in rows)
    assert all(r["tp_share_pct"] == 50.0 for r in rows)


def test_error_breakdown_carries_raw_counts():
    rows = error_breakdown({"a": (1, 2, 3, 4)})
    row = rows[0]
    assert (row["name"], row["tp"], row["fp"], row["fn"], row["tn"]) == ("a", 1, 2, 3, 4)


# --- full report -------------------------------------------------------------


def test_score_maps_consistent_with_parts():
    rng = np.random.default_rng(9)
    probs = [rand_probs_gt(rng, shape=(64, 64))[0] for _ in range(2)]
    gts = [rand_probs_gt(rng, shape=(64, 64))[1] for _ in range(2)]
    report = score_maps(probs, gts)

    t, f1 = iterative_threshold(probs, gts)
    assert report.threshold == t
    preds = [(p >= t).astype(np.uint8) for p in probs]
    counts = confusion_counts(preds, gts)
    assert (report.tp, report.fp, report.fn, report.tn) == counts
    assert report.pixel_f1 == pytest.approx(f1)
    assert report.auprc == pytest.approx(auprc(pr_curve(probs, gts)))
    assert (report.region_precision, report.region_recall, report.region_f1) == region_scores(
        preds, gts
    )


def test_metrics_csv_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    probs, gt = rand_probs_gt(rng, shape=(64, 64))
    report = score_maps(probs, gt)

    mpath = tmp_path / "metrics.csv"
    report.write_metrics_csv(str(mpath))
    with open(mpath, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1
    row = rows[0]
    assert set(row) == {
        "threshold", "pixel_precision", "pixel_recall", "pixel_f1", "pixel_iou",
        "region_precision", "region_recall", "region_f1", "auprc",
        "tp", "fp", "fn", "tn",
    }
    assert float(row["pixel_f1"]) == pytest.approx(report.pixel_f1)
    assert int(row["tp"]) == report.tp

    ppath = tmp_path / "prc.csv"
    report.write_prc_csv(str(ppath))
    with open(ppath, newline="") as fh:
        prows = list(csv.DictReader(fh))
    assert len(prows) == 99
    assert prows[0]["threshold"] == "0.01"
    # repr round-trips the scores exactly
    assert float(prows[41]["precision"]) == report.sweep[41, 1]
    assert float(prows[41]["f1"]) == report.sweep[41, 3]
