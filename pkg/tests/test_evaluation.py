"""PR/ROC metrics against brute force, calibration, and report plumbing."""

import numpy as np
import pytest

from conflictcast.evaluation import (
    EvaluationReport,
    UndefinedMetricError,
    average_precision,
    build_report,
    calibrate_threshold,
    confusion_map,
    per_month_metrics,
    pr_curve,
    precision_recall,
    roc_auc,
    roc_curve,
    write_confusion_raster_csv,
    write_per_month_csv,
    write_pr_curve_csv,
    write_roc_curve_csv,
)
from conflictcast.data_model import GridCell

WORKED_SCORES = np.array([0.9, 0.8, 0.3, 0.2])
WORKED_LABELS = np.array([1, 0, 1, 0])


def brute_force_ap(scores, labels):
    """AP from first principles: step sum over descending unique cutoffs."""
    scores = np.asarray(scores, float)
    labels = np.asarray(labels)
    npos = labels.sum()
    ap, prev_r = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        pred = scores >= t
        tp = int((pred & (labels == 1)).sum())
        p = tp / pred.sum()
        r = tp / npos
        ap += (r - prev_r) * p
        prev_r = r
    return ap


def brute_force_auc(scores, labels):
    """Pairwise comparison count with ties worth one half."""
    scores = np.asarray(scores, float)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                wins += 1.0
            elif sp == sn:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def test_worked_example_counts():
    pr = precision_recall(WORKED_SCORES, WORKED_LABELS, 0.5)
    assert (pr.tp, pr.fp, pr.fn, pr.tn) == (1, 1, 1, 1)
    assert pr.precision == 0.5
    assert pr.recall == 0.5
    assert not pr.no_predicted_positives


def test_threshold_zero_predicts_everything():
    pr = precision_recall(WORKED_SCORES, WORKED_LABELS, 0.0)
    assert pr.recall == 1.0
    assert pr.precision == 0.5  # base rate


def test_nothing_predicted_positive_flagged():
    pr = precision_recall(WORKED_SCORES, WORKED_LABELS, 2.0)
    assert pr.no_predicted_positives
    assert pr.precision == 1.0
    assert pr.recall == 0.0


def test_worked_example_ap_and_auc():
    assert average_precision(WORKED_SCORES, WORKED_LABELS) == pytest.approx(
        0.8333333333333333, abs=1e-12
    )
    _, auc = roc_auc(WORKED_SCORES, WORKED_LABELS)
    assert auc == 0.75


def test_metrics_match_brute_force_with_ties():
    rng = np.random.default_rng(47)
    for trial in range(300):
        n = int(rng.integers(2, 13))
        scores = np.round(rng.random(n), 1)  # heavy ties
        labels = rng.integers(0, 2, size=n)
        if labels.sum() == 0:
            labels[int(rng.integers(n))] = 1
        assert average_precision(scores, labels) == brute_force_ap(scores, labels)
        if 0 < labels.sum() < n:
            _, auc = roc_auc(scores, labels)
            assert auc == brute_force_auc(scores, labels)


def test_pr_curve_monotone_recall():
    rng = np.random.default_rng(53)
    scores = rng.random(200)
    labels = (rng.random(200) < 0.3).astype(int)
    thresholds, recall, precision = pr_curve(scores, labels)
    assert np.all(np.diff(thresholds) < 0)
    assert np.all(np.diff(recall) >= 0)
    assert recall[-1] == 1.0
    # precision hits 0 when the top-ranked rows are all negatives
    assert np.all((precision >= 0) & (precision <= 1))


def test_roc_curve_monotone_rates():
    rng = np.random.default_rng(59)
    scores = rng.random(150)
    labels = (rng.random(150) < 0.4).astype(int)
    _, fpr, tpr = roc_curve(scores, labels)
    assert np.all(np.diff(fpr) >= 0)
    assert np.all(np.diff(tpr) >= 0)
    assert fpr[-1] == 1.0 and tpr[-1] == 1.0


def test_degenerate_label_errors():
    with pytest.raises(UndefinedMetricError):
        average_precision([0.4, 0.6], [0, 0])
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.4, 0.6], [1, 1])
    with pytest.raises(ValueError):
        average_precision([], [])
    with pytest.raises(ValueError):
        average_precision([0.5, np.nan], [1, 0])
    with pytest.raises(ValueError):
        average_precision([0.5, 0.6], [1, 2])


def test_random_scores_ap_near_base_rate():
    rng = np.random.default_rng(61)
    n = 10_000
    scores = rng.random(n)
    labels = (rng.random(n) < 0.05).astype(int)
    ap = average_precision(scores, labels)
    assert abs(ap - labels.mean()) < 0.02


def test_calibrate_threshold_rules():
    # every count fits under the target: open the gate fully
    assert calibrate_threshold([0.1, 0.2, 0.3], 5) == 0.0
    # even the single top value overshoots: return it (documented tie case)
    assert calibrate_threshold([0.7, 0.7, 0.7], 2) == 0.7
    # midpoint between the deepest passing value and the next below
    p = [0.2, 0.4, 0.4, 0.8]
    # target 2: >=0.4 predicts 3 (too many), >=0.8 predicts 1 -> midpoint 0.6
    assert calibrate_threshold(p, 2) == pytest.approx(0.6)
    # target 3: >=0.4 predicts exactly 3 -> midpoint of 0.4 and 0.2
    assert calibrate_threshold(p, 3) == pytest.approx(0.3)


def test_calibrate_threshold_hits_target_count():
    rng = np.random.default_rng(67)
    for trial in range(50):
        p = np.round(rng.random(int(rng.integers(5, 40))), 2)
        target = int(rng.integers(1, len(p) + 1))
        thr = calibrate_threshold(p, target)
        n_pred = int((p >= thr).sum())
        assert n_pred <= max(
            target, int((p >= p.max()).sum())
        )  # never exceeds target unless even the top value does


def test_confusion_map_classes():
    cells = np.array([0, 1, 0, 1])
    months = np.array([3, 3, 4, 4])
    scores = np.array([0.9, 0.2, 0.8, 0.1])
    labels = np.array([1, 1, 0, 0])
    cm = confusion_map(cells, months, scores, labels, 0.5, [3, 4])
    assert cm[(0, 3)] == "TP"
    assert cm[(1, 3)] == "FN"
    assert cm[(0, 4)] == "FP"
    assert cm[(1, 4)] == "TN"


def test_confusion_map_requires_full_coverage():
    with pytest.raises(ValueError, match="missing prediction"):
        confusion_map(
            np.array([0, 1, 0]),
            np.array([3, 3, 4]),
            np.array([0.5, 0.5, 0.5]),
            np.array([1, 0, 1]),
            0.5,
            [3, 4],
        )


def test_per_month_metrics_and_skips():
    months_idx = np.array([1, 1, 1, 2, 2, 2, 3, 3])
    scores = np.array([0.9, 0.4, 0.1, 0.8, 0.5, 0.3, 0.6, 0.2])
    labels = np.array([1, 0, 0, 0, 0, 0, 1, 1])
    out = per_month_metrics(months_idx, scores, labels, [1, 2, 3, 4])
    assert out[1]["ap"] == 1.0
    assert out[1]["auc"] == 1.0
    assert out[2]["ap"] is None and "no positives" in out[2]["skipped"]
    assert out[3]["auc"] is None and "single class" in out[3]["skipped"]
    assert out[3]["ap"] == 1.0
    assert out[4]["skipped"] == ["no rows"]


def demo_report():
    rng = np.random.default_rng(71)
    n_cells, months = 9, [10, 11]
    cells = np.tile(np.arange(n_cells), len(months))
    month_idx = np.repeat(months, n_cells)
    labels = (rng.random(len(cells)) < 0.4).astype(int)
    scores = np.clip(labels * 0.5 + rng.random(len(cells)) * 0.5, 0, 1)
    return build_report(cells, month_idx, scores, labels, months, threshold=0.5)


def test_report_round_trip(tmp_path):
    report = demo_report()
    assert 0 <= report.ap <= 1 and 0 <= report.auc <= 1
    path = tmp_path / "evaluation.json"
    report.save(path)
    back = EvaluationReport.load(path)
    assert back.ap == report.ap
    assert back.auc == report.auc
    assert back.threshold == report.threshold
    assert back.per_month_ap == report.per_month_ap
    assert back.confusion == report.confusion
    assert back.pr_points == report.pr_points


def test_curve_and_table_writers(tmp_path):
    rng = np.random.default_rng(73)
    scores = rng.random(40)
    labels = (rng.random(40) < 0.3).astype(int)
    pr_path = tmp_path / "pr.csv"
    roc_path = tmp_path / "roc.csv"
    write_pr_curve_csv(pr_path, scores, labels)
    write_roc_curve_csv(roc_path, scores, labels)
    assert pr_path.read_text().splitlines()[0] == "threshold,recall,precision"
    assert roc_path.read_text().splitlines()[0] == "threshold,fp_rate,tp_rate"
    monthly = per_month_metrics(
        np.repeat([1, 2], 20), scores, labels, [1, 2]
    )
    pm_path = tmp_path / "per_month.csv"
    write_per_month_csv(pm_path, monthly)
    lines = pm_path.read_text().splitlines()
    assert lines[0] == "month_index,ap,auc,skipped"
    assert len(lines) == 3


def test_confusion_raster_layout(tmp_path):
    cells = [GridCell(0, 0.0, 10.0), GridCell(1, 0.0, 10.5),
             GridCell(2, 0.5, 10.0), GridCell(3, 0.5, 10.5)]
    classes = {(0, 7): "TP", (1, 7): "TN", (2, 7): "FP", (3, 7): "FN"}
    path = tmp_path / "confusion.csv"
    write_confusion_raster_csv(path, cells, classes, 7)
    lines = path.read_text().splitlines()
    assert lines[0].split(",") == ["lat\\lon", "10.0", "10.5"]
    assert lines[1].split(",") == ["0.5", "FP", "FN"]  # north row first
    assert lines[2].split(",") == ["0.0", "TP", "TN"]
