"""Trend-derived feature table and greedy forward selection.

Each fitted trend surface (temporal and chained tempo-spatial, each
split into full/short/long variants) contributes four columns: the
level, its slope, its acceleration, and the running cumulative mass.
That grid of 2 x 3 x 4 gives the 24 canonical columns.  Selection adds
one feature per round, scoring candidates by validation average
precision of a small random forest, and stops at the first strict dip.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .evaluation import average_precision
from .forecast_ensemble import ForestConfig, train_forest

_FAMILIES = ("tce", "tsce")
_VARIANTS = ("", "_short", "_long")
_STATS = ("mu", "dmu", "d2mu", "M")

COLUMN_NAMES = tuple(
    f"{stat}_{family}{variant}"
    for family in _FAMILIES
    for variant in _VARIANTS
    for stat in _STATS
)

FEATURE_HEADER = ["cell_id", "month_index"] + list(COLUMN_NAMES)

_ROW_CAP_STREAM = 29


def derive_slope(mu):
    """First derivative on the unit month grid.

    Central differences on interior points, one-sided at both ends.
    """
    mu = np.asarray(mu, dtype=float)
    if mu.ndim != 1 or len(mu) < 2:
        raise ValueError("slope needs a 1-d vector of length >= 2")
    return np.gradient(mu)


def derive_acceleration(mu):
    """Second derivative: the slope of the slope."""
    mu = np.asarray(mu, dtype=float)
    if mu.ndim != 1 or len(mu) < 3:
        raise ValueError("acceleration needs a 1-d vector of length >= 3")
    return np.gradient(np.gradient(mu))


def cumulative_mass(mu):
    """Running sum from the first month through each month."""
    mu = np.asarray(mu, dtype=float)
    if mu.ndim != 1:
        raise ValueError("cumulative mass needs a 1-d vector")
    return np.cumsum(mu)


@dataclass
class FeatureMatrix:
    """Rows keyed by (cell_id, month_index) with the 24 canonical columns."""

    cell_ids: np.ndarray
    month_indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.cell_ids = np.asarray(self.cell_ids, dtype=int)
        self.month_indices = np.asarray(self.month_indices, dtype=int)
        self.values = np.asarray(self.values, dtype=float)
        n = len(self.cell_ids)
        if self.month_indices.shape != (n,):
            raise ValueError("month_indices misaligned with cell_ids")
        if self.values.shape != (n, len(COLUMN_NAMES)):
            raise ValueError(f"values must be (n, {len(COLUMN_NAMES)})")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature values must be finite")

    def __len__(self):
        return len(self.cell_ids)

    def column(self, name):
        return self.values[:, COLUMN_NAMES.index(name)]

    def month_mask(self, month_range):
        lo, hi = month_range
        return (self.month_indices >= lo) & (self.month_indices <= hi)


def _surface_map(surfaces, label):
    if hasattr(surfaces, "values") and hasattr(surfaces, "keys"):
        out = dict(surfaces)
    else:
        out = {s.cell_id: s for s in surfaces}
    if not out:
        raise ValueError(f"no {label} surfaces given")
    return out


def _family_columns(surface):
    cols = []
    for variant_values in (surface.mu_full, surface.mu_short, surface.mu_long):
        cols.append(variant_values)
        cols.append(derive_slope(variant_values))
        cols.append(derive_acceleration(variant_values))
        cols.append(cumulative_mass(variant_values))
    return cols


def assemble_features(tce_surfaces, tsce_surfaces):
    """Join temporal and tempo-spatial surfaces into the 24-column table.

    Both inputs must cover identical (cell, month) sets; rows come out
    sorted by cell then month.  Deterministic regardless of input
    ordering.
    """
    tce = _surface_map(tce_surfaces, "temporal")
    tsce = _surface_map(tsce_surfaces, "tempo-spatial")
    missing_tsce = sorted(set(tce) - set(tsce))
    missing_tce = sorted(set(tsce) - set(tce))
    if missing_tsce or missing_tce:
        raise ValueError(
            "surface mismatch: cells missing from tempo-spatial: "
            f"{missing_tsce}; cells missing from temporal: {missing_tce}"
        )
    cell_rows, month_rows, value_rows = [], [], []
    for cid in sorted(tce):
        ts, tss = tce[cid], tsce[cid]
        if not np.array_equal(ts.months, tss.months):
            raise ValueError(f"cell {cid}: surface month grids differ")
        cols = _family_columns(ts) + _family_columns(tss)
        cell_rows.append(np.full(len(ts.months), cid, dtype=int))
        month_rows.append(ts.months)
        value_rows.append(np.column_stack(cols))
    return FeatureMatrix(
        np.concatenate(cell_rows),
        np.concatenate(month_rows),
        np.vstack(value_rows),
    )


def targets_for(features, timelines):
    """Binary conflict target aligned with the feature rows.

    timelines must cover every (cell, month) the features cover; values
    above zero mark a conflict month.
    """
    if hasattr(timelines, "values") and hasattr(timelines, "keys"):
        by_cell = dict(timelines)
    else:
        by_cell = {tl.cell_id: tl for tl in timelines}
    y = np.empty(len(features), dtype=float)
    for cid in np.unique(features.cell_ids):
        rows = np.flatnonzero(features.cell_ids == cid)
        tl = by_cell.get(int(cid))
        if tl is None:
            raise ValueError(f"no timeline for cell {cid}")
        months = features.month_indices[rows]
        lo = int(tl.months[0])
        idx = months - lo
        if idx.min() < 0 or idx.max() >= len(tl.months):
            raise ValueError(f"cell {cid}: timeline does not cover months "
                             f"{months.min()}..{months.max()}")
        y[rows] = (tl.values[idx] > 0.0).astype(float)
    return y


def forest_ap_evaluator(
    tree_count=100,
    max_depth=8,
    min_leaf=20,
    bootstrap_fraction=0.9,
    max_rows=25000,
):
    """Scorer factory: validation average precision of one seeded forest.

    The forest tries sqrt(k) features per node for a k-column candidate
    set.  Training tables larger than max_rows are cut down by a seeded
    uniform row subsample so wide searches stay tractable; pass
    max_rows=None to always train on every row.
    """

    def evaluate(x_train, y_train, x_val, y_val, seed):
        n, k = x_train.shape
        if max_rows is not None and n > max_rows:
            rng = np.random.default_rng([seed, _ROW_CAP_STREAM])
            keep = rng.choice(n, size=max_rows, replace=False)
            keep.sort()
            x_train = x_train[keep]
            y_train = y_train[keep]
        config = ForestConfig(
            tree_count=tree_count,
            max_depth=max_depth,
            min_leaf=min_leaf,
            feature_subsample=max(1, int(round(k ** 0.5))),
            bootstrap_fraction=bootstrap_fraction,
            seed=seed,
        )
        model = train_forest(config, x_train, y_train)
        return average_precision(model.predict(x_val), y_val)

    return evaluate


def _candidate_seed(seed, round_index, column_index):
    state = np.random.SeedSequence([seed, round_index, column_index])
    return int(state.generate_state(1)[0])


@dataclass
class SelectionTrace:
    """Greedy selection history: one (name, score) per round.

    chosen is always a prefix of the step names; dip_round is the
    1-based round whose score first fell strictly below the previous
    round's, or None when no dip occurred.
    """

    steps: list = field(default_factory=list)
    chosen: list = field(default_factory=list)
    dip_round: int | None = None

    def __post_init__(self):
        names = [name for name, _ in self.steps]
        if list(self.chosen) != names[: len(self.chosen)]:
            raise ValueError("chosen must be a prefix of the step names")

    def to_dict(self):
        return {
            "steps": [[name, score] for name, score in self.steps],
            "chosen": list(self.chosen),
            "dip_round": self.dip_round,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            steps=[(name, score) for name, score in data["steps"]],
            chosen=list(data["chosen"]),
            dip_round=data["dip_round"],
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def forward_select(features, targets, split, evaluator=None, seed=0, jobs=1):
    """Greedy forward selection with the strict first-dip stop.

    Each round adds the candidate maximizing validation score (ties go
    to the lower canonical column index) and stops at the first round
    scoring strictly below the previous one; equal scores continue.
    The returned chosen list holds everything before the dip.
    """
    if evaluator is None:
        evaluator = forest_ap_evaluator()
    y = np.asarray(targets, dtype=float)
    if y.shape != (len(features),):
        raise ValueError("targets misaligned with feature rows")
    train_mask = features.month_mask(split.train)
    val_mask = features.month_mask(split.validation)
    if not train_mask.any():
        raise ValueError("no feature rows in the train range")
    if not val_mask.any():
        raise ValueError("no feature rows in the validation range")
    x = features.values
    train_idx = np.flatnonzero(train_mask)
    val_idx = np.flatnonzero(val_mask)
    y_train, y_val = y[train_mask], y[val_mask]

    def score_candidate(selected_cols, column, round_index):
        cols = selected_cols + [column]
        x_train = x[np.ix_(train_idx, cols)]
        x_val = x[np.ix_(val_idx, cols)]
        try:
            return evaluator(
                x_train, y_train, x_val, y_val,
                _candidate_seed(seed, round_index, column),
            )
        except Exception as exc:
            name = COLUMN_NAMES[column]
            raise RuntimeError(
                f"selection round {round_index}: evaluator failed on {name}: {exc}"
            ) from exc

    selected = []
    remaining = list(range(len(COLUMN_NAMES)))
    steps = []
    previous = None
    dip_round = None
    for round_index in range(1, len(COLUMN_NAMES) + 1):
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                scores = list(
                    pool.map(
                        lambda c: score_candidate(selected, c, round_index),
                        remaining,
                    )
                )
        else:
            scores = [score_candidate(selected, c, round_index) for c in remaining]
        best = int(np.argmax(scores))  # first maximum: lowest column index wins ties
        best_column = remaining[best]
        best_score = float(scores[best])
        steps.append((COLUMN_NAMES[best_column], best_score))
        if previous is not None and best_score < previous:
            dip_round = round_index
            break
        selected.append(best_column)
        remaining.remove(best_column)
        previous = best_score
    return SelectionTrace(
        steps=steps,
        chosen=[COLUMN_NAMES[c] for c in selected],
        dip_round=dip_round,
    )


def write_features_csv(path, features):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(FEATURE_HEADER)
        for i in range(len(features)):
            row = [int(features.cell_ids[i]), int(features.month_indices[i])]
            row += [repr(float(v)) for v in features.values[i]]
            writer.writerow(row)


def read_features_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != FEATURE_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        cells, months, values = [], [], []
        for row in reader:
            cells.append(int(row[0]))
            months.append(int(row[1]))
            values.append([float(v) for v in row[2:]])
    return FeatureMatrix(
        np.array(cells, dtype=int),
        np.array(months, dtype=int),
        np.array(values, dtype=float),
    )
