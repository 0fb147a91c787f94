"""From-scratch random-forest classification and the jittered ensemble.

Trees are exact CART: every split is chosen by a full Gini-gain scan
over the midpoints of sorted unique feature values, with deterministic
tie-breaking (lowest feature index, then lowest threshold).  Rows are
bootstrap-resampled per tree and a random feature subset is drawn per
split.  Leaves store the positive-class fraction of their bootstrap
rows and a forest predicts the mean over its trees, so every output is
a probability without any later calibration; no undersampling is
applied anywhere.

The forecasting ensemble trains many small forests whose configurations
are independently jittered inside documented ranges, each seeded from
master_seed + model index, and summarizes their per-row predictions by
mean and percentile spread.

The tree grower is vectorized level by level: bootstrap multiplicities
are carried as integer row weights, columns are argsorted once per
forest, and each level's split scan walks every candidate boundary of
every open node in a handful of array passes.  All row statistics are
integer-valued, which keeps results exactly invariant under training
row permutation (with bootstrap weights carried along).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

ENSEMBLE_FORMAT = "conflictcast-ensemble"
ENSEMBLE_VERSION = 1

PREDICTIONS_HEADER = ["cell_id", "month_index", "probability", "spread_p05", "spread_p95"]

# rng stream tags keeping config jitter and tree growth decorrelated
_JITTER_STREAM = 7
_TREE_STREAM = 13


@dataclass(frozen=True)
class ForestConfig:
    tree_count: int = 100
    max_depth: int = 8
    min_leaf: int = 20
    feature_subsample: int = 1
    bootstrap_fraction: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.tree_count < 1:
            raise ValueError("tree_count must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        if self.feature_subsample < 1:
            raise ValueError("feature_subsample must be >= 1")
        if not 0.0 < self.bootstrap_fraction <= 1.0:
            raise ValueError("bootstrap_fraction must be in (0, 1]")


@dataclass(frozen=True)
class ConfigRanges:
    """Inclusive per-field jitter ranges; a degenerate (x, x) range pins x."""

    tree_count: tuple = (50, 150)
    max_depth: tuple = (4, 12)
    min_leaf: tuple = (5, 50)
    feature_subsample: tuple = (1, 2)
    bootstrap_fraction: tuple = (0.6, 1.0)

    def __post_init__(self):
        for name in ("tree_count", "max_depth", "min_leaf", "feature_subsample"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 1:
                raise ValueError(f"bad {name} range ({lo}, {hi})")
        lo, hi = self.bootstrap_fraction
        if lo > hi or not (0.0 < lo and hi <= 1.0):
            raise ValueError(f"bad bootstrap_fraction range ({lo}, {hi})")


DEFAULT_RANGES = ConfigRanges()


def jitter_config(base, ranges=None, seed=0):
    """Draw a member configuration uniformly inside ranges.

    Integer fields draw from the inclusive range, bootstrap_fraction
    uniformly from its interval; a degenerate range contributes no draw
    and keeps its pinned value, so all-degenerate ranges at base's
    values return base itself (with the given seed).
    """
    if ranges is None:
        ranges = DEFAULT_RANGES
    rng = np.random.default_rng([seed, _JITTER_STREAM])

    def draw_int(bounds):
        lo, hi = bounds
        return lo if lo == hi else int(rng.integers(lo, hi + 1))

    lo, hi = ranges.bootstrap_fraction
    return ForestConfig(
        tree_count=draw_int(ranges.tree_count),
        max_depth=draw_int(ranges.max_depth),
        min_leaf=draw_int(ranges.min_leaf),
        feature_subsample=draw_int(ranges.feature_subsample),
        bootstrap_fraction=lo if lo == hi else float(rng.uniform(lo, hi)),
        seed=seed,
    )


class _Tree:
    __slots__ = ("feature", "threshold", "left", "right", "value")

    def __init__(self, feature, threshold, left, right, value):
        self.feature = feature
        self.threshold = threshold
        self.left = left
        self.right = right
        self.value = value

    def predict(self, x):
        n = x.shape[0]
        node = np.zeros(n, dtype=np.int32)
        rows = np.arange(n)
        f = self.feature[node]
        while np.any(f >= 0):
            fi = np.where(f >= 0, f, 0)
            go_left = x[rows, fi] <= self.threshold[node]
            nxt = np.where(go_left, self.left[node], self.right[node])
            node = np.where(f >= 0, nxt, node)
            f = self.feature[node]
        return self.value[node]


def _grow_tree(x, w, y_pos_w, cfg, rng, presorted):
    """Level-wise exact CART on integer row weights.

    x: (n, F) float features; w: (n,) int64 bootstrap multiplicities;
    y_pos_w: (n,) int64 positive-class weight per row (w * y).  Split
    statistics are integer sums, so results depend only on the weighted
    row multiset, never on row order.
    """
    n, n_features = x.shape
    fs = min(cfg.feature_subsample, n_features)

    feat_out, thr_out = [], []
    left_out, right_out, val_out = [], [], []

    def new_node():
        feat_out.append(-1)
        thr_out.append(0.0)
        left_out.append(-1)
        right_out.append(-1)
        val_out.append(0.0)
        return len(feat_out) - 1

    slot_of_row = np.where(w > 0, 0, -1).astype(np.int32)
    active = np.flatnonzero(w > 0)
    # per-feature row lists, f-sorted, restricted to live rows as we descend
    orders = [presorted[:, f][slot_of_row[presorted[:, f]] >= 0] for f in range(n_features)]
    frontier = [new_node()]
    depth = 0
    while frontier:
        k = len(frontier)
        slots_active = slot_of_row[active]
        w_tot = np.bincount(slots_active, weights=w[active], minlength=k)
        p_tot = np.bincount(slots_active, weights=y_pos_w[active], minlength=k)
        splittable = (
            (depth < cfg.max_depth)
            & (w_tot >= 2 * cfg.min_leaf)
            & (p_tot > 0)
            & (p_tot < w_tot)
        )
        tried = np.zeros((k, n_features), dtype=bool)
        for s in range(k):
            if splittable[s]:
                tried[s, rng.choice(n_features, size=fs, replace=False)] = True

        best_score = np.full((k, n_features), np.inf)
        best_thr = np.zeros((k, n_features))
        for f in range(n_features):
            want = tried[:, f]
            if not want.any():
                continue
            rows_f = orders[f]
            g = slot_of_row[rows_f]
            if not want.all():
                keep = want[g]
                rs = rows_f[keep]
                g = g[keep]
            else:
                rs = rows_f
            if len(rs) < 2:
                continue
            order = np.argsort(g, kind="stable")
            r2 = rs[order]
            g2 = g[order]
            vals = x[r2, f]
            cw = np.cumsum(w[r2])
            cp = np.cumsum(y_pos_w[r2])
            counts = np.bincount(g2, minlength=k)
            ends = np.cumsum(counts)
            starts = ends - counts
            base_w = np.where(starts > 0, cw[np.maximum(starts - 1, 0)], 0)
            base_p = np.where(starts > 0, cp[np.maximum(starts - 1, 0)], 0)
            seg_w = np.where(counts > 0, cw[np.maximum(ends - 1, 0)] - base_w, 0)
            seg_p = np.where(counts > 0, cp[np.maximum(ends - 1, 0)] - base_p, 0)
            gb = g2[:-1]
            lw = cw[:-1] - base_w[gb]
            lp = cp[:-1] - base_p[gb]
            rw = seg_w[gb] - lw
            rp = seg_p[gb] - lp
            valid = (
                (gb == g2[1:])
                & (vals[1:] > vals[:-1])
                & (lw >= cfg.min_leaf)
                & (rw >= cfg.min_leaf)
            )
            vi = np.flatnonzero(valid)
            if len(vi) == 0:
                continue
            score = np.full(len(vals) - 1, np.inf)
            lwv, lpv = lw[vi], lp[vi]
            rwv, rpv = rw[vi], rp[vi]
            # weighted child Gini: lw * (1 - p^2 - q^2) = 2 lp (lw - lp) / lw
            score[vi] = 2.0 * lpv * (lwv - lpv) / lwv + 2.0 * rpv * (rwv - rpv) / rwv
            for s in np.flatnonzero(counts):
                a, b = starts[s], ends[s] - 1
                if b <= a:
                    continue
                seg = score[a:b]
                j = int(np.argmin(seg))  # first minimum = lowest threshold
                if np.isfinite(seg[j]):
                    best_score[s, f] = seg[j]
                    best_thr[s, f] = 0.5 * (vals[a + j] + vals[a + j + 1])

        chosen_f = np.argmin(best_score, axis=1)  # first minimum = lowest feature
        chosen_score = best_score[np.arange(k), chosen_f]
        can_split = splittable & np.isfinite(chosen_score)

        child_slot = np.full((k, 2), -1, dtype=np.int32)
        new_frontier = []
        for s in range(k):
            node = frontier[s]
            if can_split[s]:
                li, ri = new_node(), new_node()
                feat_out[node] = int(chosen_f[s])
                thr_out[node] = float(best_thr[s, chosen_f[s]])
                left_out[node] = li
                right_out[node] = ri
                child_slot[s, 0] = len(new_frontier)
                new_frontier.append(li)
                child_slot[s, 1] = len(new_frontier)
                new_frontier.append(ri)
            else:
                val_out[node] = float(p_tot[s] / w_tot[s])

        if new_frontier:
            keep = can_split[slots_active]
            retired = active[~keep]
            slot_of_row[retired] = -1
            active = active[keep]
            s2 = slot_of_row[active]
            f2 = chosen_f[s2]
            go_left = x[active, f2] <= best_thr[s2, f2]
            slot_of_row[active] = np.where(go_left, child_slot[s2, 0], child_slot[s2, 1])
            orders = [rows_f[slot_of_row[rows_f] >= 0] for rows_f in orders]
        else:
            slot_of_row[active] = -1
            active = active[:0]
        frontier = new_frontier
        depth += 1

    return _Tree(
        np.array(feat_out, dtype=np.int32),
        np.array(thr_out),
        np.array(left_out, dtype=np.int32),
        np.array(right_out, dtype=np.int32),
        np.array(val_out),
    )


@dataclass
class RandomForest:
    config: ForestConfig
    trees: list
    n_features: int
    feature_names: tuple = None

    def predict(self, x):
        """Mean positive-class fraction over trees, one value per row."""
        x = _check_matrix(x, self.n_features)
        out = np.zeros(x.shape[0])
        for tree in self.trees:
            out += tree.predict(x)
        return out / len(self.trees)


def _check_matrix(x, n_features=None):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("feature matrix must be 2-d")
    if n_features is not None and x.shape[1] != n_features:
        raise ValueError(f"expected {n_features} feature columns, got {x.shape[1]}")
    return x


def bootstrap_weights(rng, n_rows, fraction):
    """Integer multiplicity per row of one bootstrap draw."""
    size = max(1, int(round(fraction * n_rows)))
    idx = rng.integers(0, n_rows, size=size)
    return np.bincount(idx, minlength=n_rows).astype(np.int64)


def train_forest(config, x, y, feature_names=None, row_weights=None):
    """Grow config.tree_count trees on (x, y); y is binary.

    row_weights (integer multiplicities, same for every tree) replaces
    the per-tree bootstrap when given; it exists for deterministic
    single-draw experiments and tests.
    """
    x = _check_matrix(x)
    y = np.asarray(y)
    if x.shape[0] < 2:
        raise ValueError("need at least two training rows")
    if y.shape != (x.shape[0],):
        raise ValueError("targets must align with rows")
    uniq = np.unique(y)
    if not np.all(np.isin(uniq, (0, 1))):
        raise ValueError("targets must be binary 0/1")
    y = y.astype(np.int64)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite feature value")
    presorted = np.argsort(x, axis=0, kind="stable").astype(np.int32)
    if row_weights is not None:
        row_weights = np.asarray(row_weights, dtype=np.int64)
        if row_weights.shape != y.shape or np.any(row_weights < 0) or row_weights.sum() < 1:
            raise ValueError("row_weights must be non-negative with positive sum")
    trees = []
    for t in range(config.tree_count):
        rng = np.random.default_rng([config.seed, _TREE_STREAM, t])
        if row_weights is None:
            w = bootstrap_weights(rng, x.shape[0], config.bootstrap_fraction)
        else:
            w = row_weights
        trees.append(_grow_tree(x, w, w * y, config, rng, presorted))
    return RandomForest(
        config,
        trees,
        x.shape[1],
        tuple(feature_names) if feature_names is not None else None,
    )


@dataclass
class Ensemble:
    """Many independently configured forests over one feature layout."""

    models: list
    master_seed: int
    feature_names: tuple = None

    @property
    def n_features(self):
        return self.models[0].n_features

    def predict(self, x):
        """(mean probability per row, per-model matrix (n_models, n_rows))."""
        x = _check_matrix(x, self.n_features)
        per_model = np.vstack([m.predict(x) for m in self.models])
        return per_model.mean(axis=0), per_model


def train_ensemble(
    x,
    y,
    n_models=1000,
    master_seed=0,
    base=None,
    ranges=None,
    feature_names=None,
):
    """Train the jittered forest ensemble; model i is seeded master_seed + i."""
    if n_models < 1:
        raise ValueError("need at least one model")
    if base is None:
        base = ForestConfig()
    models = []
    for i in range(n_models):
        cfg = jitter_config(base, ranges, seed=master_seed + i)
        models.append(train_forest(cfg, x, y, feature_names=feature_names))
    return Ensemble(models, master_seed, tuple(feature_names) if feature_names else None)


def prediction_spread(per_model, lower=5.0, upper=95.0):
    """Percentile band across ensemble members, per row."""
    return (
        np.percentile(per_model, lower, axis=0),
        np.percentile(per_model, upper, axis=0),
    )


def save_ensemble(path, ensemble):
    """Single .npz with flat node arrays, per-tree offsets and a header."""
    feature, threshold, left, right, value = [], [], [], [], []
    tree_offsets = [0]
    model_tree_counts = []
    configs = []
    total = 0
    for forest in ensemble.models:
        c = forest.config
        configs.append(
            [c.tree_count, c.max_depth, c.min_leaf, c.feature_subsample, c.bootstrap_fraction, c.seed]
        )
        model_tree_counts.append(len(forest.trees))
        for tree in forest.trees:
            feature.append(tree.feature)
            threshold.append(tree.threshold)
            left.append(tree.left)
            right.append(tree.right)
            value.append(tree.value)
            total += len(tree.feature)
            tree_offsets.append(total)
    header = {
        "format": ENSEMBLE_FORMAT,
        "version": ENSEMBLE_VERSION,
        "master_seed": ensemble.master_seed,
        "n_features": ensemble.n_features,
        "feature_names": list(ensemble.feature_names) if ensemble.feature_names else None,
    }
    np.savez(
        path,
        header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
        configs=np.array(configs, dtype=np.float64),
        model_tree_counts=np.array(model_tree_counts, dtype=np.int64),
        tree_offsets=np.array(tree_offsets, dtype=np.int64),
        feature=np.concatenate(feature),
        threshold=np.concatenate(threshold),
        left=np.concatenate(left),
        right=np.concatenate(right),
        value=np.concatenate(value),
    )


def load_ensemble(path):
    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header.get("format") != ENSEMBLE_FORMAT:
            raise ValueError(f"not an ensemble file: {path}")
        configs = data["configs"]
        model_tree_counts = data["model_tree_counts"]
        offsets = data["tree_offsets"]
        feature = data["feature"]
        threshold = data["threshold"]
        left = data["left"]
        right = data["right"]
        value = data["value"]
    names = header.get("feature_names")
    names = tuple(names) if names else None
    models = []
    tree_idx = 0
    for cfg_row, tcount in zip(configs, model_tree_counts):
        cfg = ForestConfig(
            tree_count=int(cfg_row[0]),
            max_depth=int(cfg_row[1]),
            min_leaf=int(cfg_row[2]),
            feature_subsample=int(cfg_row[3]),
            bootstrap_fraction=float(cfg_row[4]),
            seed=int(cfg_row[5]),
        )
        trees = []
        for _ in range(int(tcount)):
            a, b = offsets[tree_idx], offsets[tree_idx + 1]
            trees.append(
                _Tree(feature[a:b], threshold[a:b], left[a:b], right[a:b], value[a:b])
            )
            tree_idx += 1
        models.append(RandomForest(cfg, trees, int(header["n_features"]), names))
    return Ensemble(models, int(header["master_seed"]), names)


def write_predictions_csv(path, cell_ids, months, probability, p05, p95):
    order = np.lexsort((months, cell_ids))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREDICTIONS_HEADER)
        for i in order:
            writer.writerow(
                [
                    int(cell_ids[i]),
                    int(months[i]),
                    repr(float(probability[i])),
                    repr(float(p05[i])),
                    repr(float(p95[i])),
                ]
            )


def read_predictions_csv(path):

    cell_ids, months, prob, p05, p95 = [], [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != PREDICTIONS_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        for row in reader:
            cell_ids.append(int(row[0]))
            months.append(int(row[1]))
            prob.append(float(row[2]))
            p05.append(float(row[3]))
            p95.append(float(row[4]))
    return (
        np.array(cell_ids),
        np.array(months),
        np.array(prob),
        np.array(p05),
        np.array(p95),
    )
