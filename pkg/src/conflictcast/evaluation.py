"""Ranking metrics, threshold calibration, and confusion rasters.

A case is predicted positive when its score is >= the threshold.
Average precision is the step sum AP = sum_n (R_n - R_{n-1}) P_n over
descending unique score thresholds (ties grouped at one threshold).
AUC is the Mann-Whitney rank statistic: the fraction of
positive-negative pairs ranked correctly, ties counting one half,
computed through average ranks.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

PR_CURVE_HEADER = ["threshold", "recall", "precision"]
ROC_CURVE_HEADER = ["threshold", "fp_rate", "tp_rate"]
PER_MONTH_HEADER = ["month_index", "ap", "auc", "skipped"]


class UndefinedMetricError(ValueError):
    """Raised when a metric's class-balance precondition is not met."""


@dataclass(frozen=True)
class PrecisionRecall:
    """Confusion counts and rates at one threshold.

    When nothing is predicted positive, precision is reported as 1.0 and
    no_predicted_positives is set so callers can tell the degenerate
    case apart from a perfect one.
    """

    precision: float
    recall: float
    tp: int
    fp: int
    tn: int
    fn: int
    no_predicted_positives: bool = False


def _as_scores_labels(scores, labels):
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    if s.ndim != 1 or y.shape != s.shape:
        raise ValueError("scores and labels must be aligned 1-d arrays")
    if len(s) == 0:
        raise ValueError("scores must be non-empty")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    y = y.astype(float)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be binary")
    return s, y.astype(np.int64)


def precision_recall(scores, labels, threshold):
    """Confusion counts with positives defined by score >= threshold."""
    s, y = _as_scores_labels(scores, labels)
    pred = s >= threshold
    tp = int(np.count_nonzero(pred & (y == 1)))
    fp = int(np.count_nonzero(pred & (y == 0)))
    fn = int(np.count_nonzero(~pred & (y == 1)))
    tn = int(np.count_nonzero(~pred & (y == 0)))
    no_pred = tp + fp == 0
    precision = 1.0 if no_pred else tp / (tp + fp)
    recall = 0.0 if tp + fn == 0 else tp / (tp + fn)
    return PrecisionRecall(precision, recall, tp, fp, tn, fn, no_pred)


def pr_curve(scores, labels):
    """(thresholds, recall, precision) at descending unique thresholds."""
    s, y = _as_scores_labels(scores, labels)
    npos = int(y.sum())
    if npos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    order = np.argsort(-s, kind="stable")
    ss = s[order]
    yy = y[order]
    last = np.flatnonzero(np.r_[ss[1:] != ss[:-1], True])
    tp = np.cumsum(yy)[last]
    predicted = last + 1
    return ss[last], tp / npos, tp / predicted


def average_precision(scores, labels):
    """Step-sum AP over descending unique thresholds."""
    _, recall, precision = pr_curve(scores, labels)
    ap = 0.0
    prev = 0.0
    # plain loop keeps the summation order identical to the defining formula
    for r, p in zip(recall, precision):
        ap += (r - prev) * p
        prev = r
    return float(ap)


def roc_curve(scores, labels):
    """(thresholds, fp_rate, tp_rate) at descending unique thresholds."""
    s, y = _as_scores_labels(scores, labels)
    npos = int(y.sum())
    nneg = len(y) - npos
    if npos == 0 or nneg == 0:
        raise UndefinedMetricError("roc needs both classes present")
    order = np.argsort(-s, kind="stable")
    ss = s[order]
    yy = y[order]
    last = np.flatnonzero(np.r_[ss[1:] != ss[:-1], True])
    tp = np.cumsum(yy)[last]
    fp = (last + 1) - tp
    return ss[last], fp / nneg, tp / npos


def roc_auc(scores, labels):
    """ROC points and the rank-statistic AUC (ties count one half)."""
    s, y = _as_scores_labels(scores, labels)
    npos = int(y.sum())
    nneg = len(y) - npos
    if npos == 0 or nneg == 0:
        raise UndefinedMetricError("roc needs both classes present")
    ranks = rankdata(s)
    auc = (ranks[y == 1].sum() - npos * (npos + 1) / 2.0) / (npos * nneg)
    _, fpr, tpr = roc_curve(s, y)
    points = list(zip(fpr.tolist(), tpr.tolist()))
    return points, float(auc)


def calibrate_threshold(predictions, target_count):
    """Deepest threshold predicting at most target_count positives.

    Walks unique prediction values from the top down and keeps the
    smallest value v with count(predictions >= v) <= target_count, then
    returns the midpoint between v and the next unique value below so
    the cut sits strictly between ranks.  If every value satisfies the
    budget the threshold is 0.0 (everything positive).  If even the top
    value overshoots (ties wider than the budget), that value is
    returned and the count overshoots; callers get a deterministic rule
    either way.
    """
    p = np.asarray(predictions, dtype=float)
    if p.ndim != 1 or len(p) == 0:
        raise ValueError("predictions must be a non-empty 1-d array")
    if not np.all(np.isfinite(p)):
        raise ValueError("predictions must be finite")
    if target_count < 0:
        raise ValueError("target_count must be >= 0")
    uniq = np.unique(p)  # ascending
    n_ge = len(p) - np.searchsorted(np.sort(p), uniq, side="left")
    ok = n_ge <= target_count
    if not ok.any():
        return float(uniq[-1])
    deepest = int(np.flatnonzero(ok)[0])  # smallest value within budget
    if deepest == 0:
        return 0.0
    return float(0.5 * (uniq[deepest] + uniq[deepest - 1]))


def confusion_map(cell_ids, month_indices, scores, labels, threshold, months):
    """Per cell-month confusion class over the requested months.

    Requires every requested month to cover the same cell set; a hole
    is an error naming the missing pair.
    """
    cell_ids = np.asarray(cell_ids, dtype=int)
    month_indices = np.asarray(month_indices, dtype=int)
    s, y = _as_scores_labels(scores, labels)
    if not (len(cell_ids) == len(month_indices) == len(s)):
        raise ValueError("cell_ids, month_indices, scores must be aligned")
    months = [int(m) for m in months]
    want = set(months)
    keep = np.isin(month_indices, list(want))
    cells = np.unique(cell_ids[keep])
    seen = set(zip(cell_ids[keep].tolist(), month_indices[keep].tolist()))
    for m in months:
        for c in cells:
            if (int(c), m) not in seen:
                raise ValueError(f"missing prediction for cell {c}, month {m}")
    out = {}
    pred = s >= threshold
    for c, m, pp, yy in zip(
        cell_ids[keep], month_indices[keep], pred[keep], y[keep]
    ):
        if yy == 1:
            cls = "TP" if pp else "FN"
        else:
            cls = "FP" if pp else "TN"
        out[(int(c), int(m))] = cls
    return out


def per_month_metrics(month_indices, scores, labels, months):
    """month -> {"ap", "auc", "skipped"} computed within each month.

    Degenerate months are skipped with a reason instead of propagating
    NaN: AP needs a positive, AUC needs both classes.
    """
    month_indices = np.asarray(month_indices, dtype=int)
    s, y = _as_scores_labels(scores, labels)
    out = {}
    for m in months:
        m = int(m)
        mask = month_indices == m
        entry = {"ap": None, "auc": None, "skipped": []}
        if not mask.any():
            entry["skipped"].append("no rows")
            out[m] = entry
            continue
        sm, ym = s[mask], y[mask]
        if ym.sum() == 0:
            entry["skipped"].append("no positives")
        else:
            entry["ap"] = average_precision(sm, ym)
        if ym.sum() in (0, len(ym)):
            entry["skipped"].append("single class")
        else:
            _, entry["auc"] = roc_auc(sm, ym)
        out[m] = entry
    return out


@dataclass
class EvaluationReport:
    """Scores, curves, per-month metrics, and the confusion classes."""

    ap: float
    auc: float
    threshold: float
    pr_points: list = field(default_factory=list)  # (recall, precision)
    roc_points: list = field(default_factory=list)  # (fp_rate, tp_rate)
    per_month_ap: dict = field(default_factory=dict)
    per_month_auc: dict = field(default_factory=dict)
    skipped_months: dict = field(default_factory=dict)
    confusion: dict = field(default_factory=dict)  # (cell, month) -> class

    def to_dict(self):
        return {
            "ap": self.ap,
            "auc": self.auc,
            "threshold": self.threshold,
            "pr_points": [list(p) for p in self.pr_points],
            "roc_points": [list(p) for p in self.roc_points],
            "per_month_ap": {str(k): v for k, v in self.per_month_ap.items()},
            "per_month_auc": {str(k): v for k, v in self.per_month_auc.items()},
            "skipped_months": {str(k): v for k, v in self.skipped_months.items()},
            "confusion": {f"{c},{m}": v for (c, m), v in self.confusion.items()},
        }

    @classmethod
    def from_dict(cls, data):
        conf = {}
        for key, v in data["confusion"].items():
            c, m = key.split(",")
            conf[(int(c), int(m))] = v
        return cls(
            ap=data["ap"],
            auc=data["auc"],
            threshold=data["threshold"],
            pr_points=[tuple(p) for p in data["pr_points"]],
            roc_points=[tuple(p) for p in data["roc_points"]],
            per_month_ap={int(k): v for k, v in data["per_month_ap"].items()},
            per_month_auc={int(k): v for k, v in data["per_month_auc"].items()},
            skipped_months={int(k): v for k, v in data["skipped_months"].items()},
            confusion=conf,
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def build_report(cell_ids, month_indices, scores, labels, test_months, threshold):
    """Assemble the full report for the given evaluation months."""
    month_indices = np.asarray(month_indices, dtype=int)
    mask = np.isin(month_indices, np.asarray(list(test_months), dtype=int))
    if not mask.any():
        raise ValueError("no rows fall inside the evaluation months")
    s = np.asarray(scores, dtype=float)[mask]
    y = np.asarray(labels)[mask]
    _, recall, precision = pr_curve(s, y)
    ap = average_precision(s, y)
    roc_points, auc = roc_auc(s, y)
    monthly = per_month_metrics(month_indices[mask], s, y, test_months)
    conf = confusion_map(
        np.asarray(cell_ids, dtype=int)[mask],
        month_indices[mask],
        s,
        y,
        threshold,
        test_months,
    )
    return EvaluationReport(
        ap=ap,
        auc=auc,
        threshold=float(threshold),
        pr_points=list(zip(recall.tolist(), precision.tolist())),
        roc_points=roc_points,
        per_month_ap={m: e["ap"] for m, e in monthly.items()},
        per_month_auc={m: e["auc"] for m, e in monthly.items()},
        skipped_months={m: e["skipped"] for m, e in monthly.items() if e["skipped"]},
        confusion=conf,
    )


def write_pr_curve_csv(path, scores, labels):
    thresholds, recall, precision = pr_curve(scores, labels)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PR_CURVE_HEADER)
        for t, r, p in zip(thresholds, recall, precision):
            writer.writerow([repr(float(t)), repr(float(r)), repr(float(p))])


def write_roc_curve_csv(path, scores, labels):
    thresholds, fpr, tpr = roc_curve(scores, labels)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ROC_CURVE_HEADER)
        for t, f, tp in zip(thresholds, fpr, tpr):
            writer.writerow([repr(float(t)), repr(float(f)), repr(float(tp))])


def write_per_month_csv(path, monthly):
    """monthly is the per_month_metrics mapping."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PER_MONTH_HEADER)
        for m in sorted(monthly):
            entry = monthly[m]
            writer.writerow(
                [
                    m,
                    "" if entry["ap"] is None else repr(float(entry["ap"])),
                    "" if entry["auc"] is None else repr(float(entry["auc"])),
                    ";".join(entry["skipped"]),
                ]
            )


def write_confusion_raster_csv(path, cells, classes, month):
    """One CSV grid for a month: rows north to south, columns west to east.

    Cells absent from classes render as empty strings.
    """
    lats = sorted({c.lat for c in cells}, reverse=True)
    lons = sorted({c.lon for c in cells})
    by_pos = {(c.lat, c.lon): c.cell_id for c in cells}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lat\\lon"] + [repr(float(x)) for x in lons])
        for lat in lats:
            row = [repr(float(lat))]
            for lon in lons:
                cid = by_pos.get((lat, lon))
                cls = classes.get((cid, month)) if cid is not None else None
                row.append("" if cls is None else cls)
            writer.writerow(row)
