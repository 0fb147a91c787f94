"""Command-line pipeline: stages, artifacts, and manifests.

Every stage reads its inputs from files under the output directory and
writes its own artifacts plus a manifest carrying the resolved
configuration, its hash, and the seed, so a run is reproducible from
the manifest alone.  `pipeline` simply runs the stages in order; the
result is identical to invoking them one at a time.

Exit codes: 0 success, 1 usage or configuration problems, 2 data
errors (bad inputs, missing upstream artifacts, undefined metrics),
3 numerical failures (singular models, non-convergence).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import evaluation, feature_lab, forecast_ensemble, synth
from .data_model import (
    GridCell,
    IngestError,
    SplitSpec,
    build_timelines,
    ingest_events,
    select_training_timelines,
    write_events,
)
from .evaluation import UndefinedMetricError
from .exposure_spatial import (
    estimate_sce_all,
    extrapolate_tsce_all,
    fit_sce,
    fit_tsce,
    read_sce_csv,
    sce_timelines,
    write_sce_csv,
)
from .exposure_temporal import (
    extrapolate_tce_all,
    fit_tce,
    read_trend_csv,
    write_trend_csv,
)
from .gp_engine import NonConvergenceError, SingularModelError, save_model

EVENTS = "events.csv"
CELLS = "cells.csv"
TRUTH = "truth.csv"
SYNTH_CONFIG = "synth_config.json"
TCE_MODEL = "tce_model.json"
TCE_SURFACES = "tce_surfaces.csv"
SCE_MODEL = "sce_model.json"
SCE_SURFACES = "sce_surfaces.csv"
TSCE_MODEL = "tsce_model.json"
TSCE_SURFACES = "tsce_surfaces.csv"
FEATURES = "features.csv"
SELECTION = "selection.json"
ENSEMBLE = "ensemble.npz"
PREDICTIONS = "predictions.csv"
EVALUATION = "evaluation.json"
PR_CURVE = "pr_curve.csv"
ROC_CURVE = "roc_curve.csv"
PER_MONTH = "per_month.csv"

PIPELINE_ORDER = (
    "fit-tce",
    "fit-sce",
    "fit-tsce",
    "features",
    "select",
    "train",
    "forecast",
    "evaluate",
)


class ConfigError(ValueError):
    """Bad configuration file or value."""


class StageDependencyError(ValueError):
    """An upstream artifact is missing; the message names the stage to run."""


@dataclass
class RunConfig:
    """Resolved run settings; every field has a working default.

    events names the source CSV consumed by `ingest`; all other stages
    read and write artifacts inside `out`.
    """

    events: str = EVENTS
    out: str = "run"
    seed: int = 0
    jobs: int = 1
    horizon: int = 36
    train_range: str = "0..299"
    validation_range: str = "300..335"
    test_range: str = "336..371"
    tce_min_conflict_months: int = 8
    tce_window_months: int = 12
    tce_starts: int = 8
    sce_subset_size: int = 60
    sce_starts: int = 8
    tsce_starts: int = 8
    select_trees: int = 100
    select_depth: int = 8
    select_min_leaf: int = 20
    select_max_rows: int = 25000
    ensemble_size: int = 1000
    jitter_trees: str = "50..150"
    jitter_depth: str = "4..12"
    jitter_min_leaf: str = "5..50"
    jitter_subsample: str = "1..2"
    jitter_bootstrap: str = "0.6..1.0"
    synth: bool = False
    synth_rows: int = 20
    synth_cols: int = 20
    synth_months: int = 372
    synth_l_long: float = 120.0
    synth_eta_long: float = 0.5
    synth_l_short: float = 4.0
    synth_eta_short: float = 0.3
    synth_noise: float = 0.5
    synth_l_spatial: float = 0.8
    synth_eta_spatial: float = 0.6
    synth_noise_spatial: float = 0.05
    synth_link_scale: float = 1.0
    synth_link_offset: float = 0.0
    stages: str = ",".join(PIPELINE_ORDER)

    def split(self):
        text = (
            f"train = {self.train_range}\n"
            f"validation = {self.validation_range}\n"
            f"test = {self.test_range}\n"
        )
        return SplitSpec.from_text(text, source="<config>")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _coerce(name, kind, raw, where):
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError("expected true or false")
            return low == "true"
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {name}: {exc}") from None


def parse_config(text, source="<config>"):
    """key = value lines onto a RunConfig; unknown keys are rejected."""
    kinds = {f.name: f.type for f in fields(RunConfig)}
    cfg = RunConfig()
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source} line {lineno}: expected key = value")
        key = key.strip()
        value = value.strip()
        if key not in kinds:
            raise ConfigError(f"{source} line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source} line {lineno}: duplicate key {key!r}")
        seen.add(key)
        setattr(cfg, key, _coerce(key, kinds[key], value, f"{source} line {lineno}"))
    return cfg


def read_config(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, source=str(path))


def _config_sha256(cfg):
    lines = [f"{k} = {v}" for k, v in sorted(cfg.to_dict().items())]
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()


def _write_manifest(out, stage, cfg, inputs, outputs):
    manifest = {
        "stage": stage,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "config_sha256": _config_sha256(cfg),
        "inputs": sorted(inputs),
        "outputs": sorted(outputs),
    }
    path = out / f"manifest_{stage.replace('-', '_')}.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _require(out, name, producer):
    path = out / name
    if not path.exists():
        raise StageDependencyError(f"{name} not found in {out}; run {producer} first")
    return path


def _write_cells(path, cells):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell_id", "lat", "lon"])
        for c in sorted(cells, key=lambda c: c.cell_id):
            writer.writerow([c.cell_id, repr(float(c.lat)), repr(float(c.lon))])


def _read_cells(path):
    cells = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["cell_id", "lat", "lon"]:
            raise IngestError(f"{path}: unexpected header {header}")
        for row in reader:
            cells.append(GridCell(int(row[0]), float(row[1]), float(row[2])))
    return cells


def _load_data(out):
    """Records plus the full cell list (cells.csv covers event-free cells)."""
    _require(out, EVENTS, "ingest or synth")
    records, cells = ingest_events(out / EVENTS)
    cells_path = out / CELLS
    if cells_path.exists():
        full = _read_cells(cells_path)
        known = {c.cell_id for c in full}
        missing = sorted({r.cell_id for r in records} - known)
        if missing:
            raise IngestError(f"{CELLS} lacks cells with events: {missing}")
        cells = full
    return records, sorted(cells, key=lambda c: c.cell_id)


def _effective_horizon(cfg, split):
    return max(cfg.horizon, split.test[1] - split.train[1])


def _window_timelines(records, cells, window):
    lo, hi = window
    kept = [r for r in records if lo <= r.month_index <= hi]
    return build_timelines(kept, cells, window)


def stage_synth(cfg, out):
    config = synth.SynthConfig(
        grid_rows=cfg.synth_rows,
        grid_cols=cfg.synth_cols,
        months=cfg.synth_months,
        l_long=cfg.synth_l_long,
        eta_long=cfg.synth_eta_long,
        l_short=cfg.synth_l_short,
        eta_short=cfg.synth_eta_short,
        noise=cfg.synth_noise,
        l_spatial=cfg.synth_l_spatial,
        eta_spatial=cfg.synth_eta_spatial,
        noise_spatial=cfg.synth_noise_spatial,
        link_scale=cfg.synth_link_scale,
        link_offset=cfg.synth_link_offset,
        seed=cfg.seed,
    )
    records, cells, truth = synth.generate(config)
    write_events(out / EVENTS, records, cells)
    _write_cells(out / CELLS, cells)
    synth.write_truth_csv(out / TRUTH, truth)
    config.save(out / SYNTH_CONFIG)
    _write_manifest(out, "synth", cfg, [], [EVENTS, CELLS, TRUTH, SYNTH_CONFIG])


def stage_ingest(cfg, out):
    source = Path(cfg.events)
    if not source.exists():
        raise IngestError(f"event file not found: {source}")
    records, cells = ingest_events(source)
    write_events(out / EVENTS, records, cells)
    _write_cells(out / CELLS, cells)
    _write_manifest(out, "ingest", cfg, [str(source)], [EVENTS, CELLS])


def stage_fit_tce(cfg, out):
    records, cells = _load_data(out)
    split = cfg.split()
    timelines = _window_timelines(records, cells, split.train)
    training = select_training_timelines(
        timelines, cfg.tce_min_conflict_months, cfg.tce_window_months
    )
    if not training:
        raise IngestError("no cell passes the conflict-months training rule")
    model = fit_tce(training, n_starts=cfg.tce_starts, seed=cfg.seed)
    save_model(out / TCE_MODEL, model)
    surfaces = extrapolate_tce_all(timelines, model, _effective_horizon(cfg, split))
    write_trend_csv(out / TCE_SURFACES, surfaces)
    _write_manifest(out, "fit-tce", cfg, [EVENTS, CELLS], [TCE_MODEL, TCE_SURFACES])


def stage_fit_sce(cfg, out):
    records, cells = _load_data(out)
    split = cfg.split()
    timelines = _window_timelines(records, cells, split.train)
    model = fit_sce(
        timelines, cells, cfg.sce_subset_size, n_starts=cfg.sce_starts, seed=cfg.seed
    )
    save_model(out / SCE_MODEL, model)
    surfaces = estimate_sce_all(timelines, cells, model, cfg.sce_subset_size)
    write_sce_csv(out / SCE_SURFACES, surfaces)
    _write_manifest(out, "fit-sce", cfg, [EVENTS, CELLS], [SCE_MODEL, SCE_SURFACES])


def stage_fit_tsce(cfg, out):
    records, cells = _load_data(out)
    _require(out, SCE_SURFACES, "fit-sce")
    split = cfg.split()
    surfaces = read_sce_csv(out / SCE_SURFACES)
    series = sce_timelines(surfaces, cells)
    magnitudes = _window_timelines(records, cells, split.train)
    model = fit_tsce(
        series,
        magnitudes,
        n_starts=cfg.tsce_starts,
        seed=cfg.seed,
        min_conflict_months=cfg.tce_min_conflict_months,
        window_months=cfg.tce_window_months,
    )
    save_model(out / TSCE_MODEL, model)
    trend = extrapolate_tsce_all(series, model, _effective_horizon(cfg, split))
    write_trend_csv(out / TSCE_SURFACES, trend)
    _write_manifest(
        out, "fit-tsce", cfg, [EVENTS, CELLS, SCE_SURFACES], [TSCE_MODEL, TSCE_SURFACES]
    )


def stage_features(cfg, out):
    _require(out, TCE_SURFACES, "fit-tce")
    _require(out, TSCE_SURFACES, "fit-tsce")
    tce = read_trend_csv(out / TCE_SURFACES)
    tsce = read_trend_csv(out / TSCE_SURFACES)
    features = feature_lab.assemble_features(tce, tsce)
    feature_lab.write_features_csv(out / FEATURES, features)
    _write_manifest(out, "features", cfg, [TCE_SURFACES, TSCE_SURFACES], [FEATURES])


def _row_subset(features, mask):
    return feature_lab.FeatureMatrix(
        features.cell_ids[mask], features.month_indices[mask], features.values[mask]
    )


def _feature_targets(cfg, out, features, upto):
    records, cells = _load_data(out)
    timelines = _window_timelines(records, cells, (0, upto))
    return feature_lab.targets_for(features, timelines)


def stage_select(cfg, out):
    _require(out, FEATURES, "features")
    features = feature_lab.read_features_csv(out / FEATURES)
    split = cfg.split()
    mask = features.month_mask(split.train) | features.month_mask(split.validation)
    subset = _row_subset(features, mask)
    targets = _feature_targets(cfg, out, subset, split.validation[1])
    evaluator = feature_lab.forest_ap_evaluator(
        tree_count=cfg.select_trees,
        max_depth=cfg.select_depth,
        min_leaf=cfg.select_min_leaf,
        max_rows=cfg.select_max_rows if cfg.select_max_rows > 0 else None,
    )
    trace = feature_lab.forward_select(
        subset, targets, split, evaluator=evaluator, seed=cfg.seed, jobs=cfg.jobs
    )
    trace.save(out / SELECTION)
    _write_manifest(out, "select", cfg, [FEATURES, EVENTS], [SELECTION])


def _parse_int_range(text, name):
    lo, sep, hi = text.partition("..")
    if not sep:
        raise ConfigError(f"{name}: range {text!r} must look like 50..150")
    return int(lo), int(hi)


def _parse_float_range(text, name):
    lo, sep, hi = text.partition("..")
    if not sep:
        raise ConfigError(f"{name}: range {text!r} must look like 0.6..1.0")
    return float(lo), float(hi)


def _jitter_ranges(cfg):
    return forecast_ensemble.ConfigRanges(
        tree_count=_parse_int_range(cfg.jitter_trees, "jitter_trees"),
        max_depth=_parse_int_range(cfg.jitter_depth, "jitter_depth"),
        min_leaf=_parse_int_range(cfg.jitter_min_leaf, "jitter_min_leaf"),
        feature_subsample=_parse_int_range(cfg.jitter_subsample, "jitter_subsample"),
        bootstrap_fraction=_parse_float_range(cfg.jitter_bootstrap, "jitter_bootstrap"),
    )


def _chosen_columns(trace):
    if not trace.chosen:
        raise ValueError("selection chose no features; cannot train")
    return [feature_lab.COLUMN_NAMES.index(name) for name in trace.chosen]


def stage_train(cfg, out):
    _require(out, FEATURES, "features")
    _require(out, SELECTION, "select")
    features = feature_lab.read_features_csv(out / FEATURES)
    trace = feature_lab.SelectionTrace.load(out / SELECTION)
    cols = _chosen_columns(trace)
    split = cfg.split()
    mask = features.month_mask(split.train)
    subset = _row_subset(features, mask)
    targets = _feature_targets(cfg, out, subset, split.train[1])
    x = subset.values[:, cols]
    ensemble = forecast_ensemble.train_ensemble(
        x,
        targets,
        n_models=cfg.ensemble_size,
        master_seed=cfg.seed,
        ranges=_jitter_ranges(cfg),
        feature_names=list(trace.chosen),
    )
    forecast_ensemble.save_ensemble(out / ENSEMBLE, ensemble)
    _write_manifest(out, "train", cfg, [FEATURES, SELECTION, EVENTS], [ENSEMBLE])


def stage_forecast(cfg, out):
    _require(out, FEATURES, "features")
    _require(out, SELECTION, "select")
    _require(out, ENSEMBLE, "train")
    features = feature_lab.read_features_csv(out / FEATURES)
    trace = feature_lab.SelectionTrace.load(out / SELECTION)
    cols = _chosen_columns(trace)
    ensemble = forecast_ensemble.load_ensemble(out / ENSEMBLE)
    probability, per_model = ensemble.predict(features.values[:, cols])
    p05, p95 = forecast_ensemble.prediction_spread(per_model)
    forecast_ensemble.write_predictions_csv(
        out / PREDICTIONS,
        features.cell_ids,
        features.month_indices,
        probability,
        p05,
        p95,
    )
    _write_manifest(
        out, "forecast", cfg, [FEATURES, SELECTION, ENSEMBLE], [PREDICTIONS]
    )


def stage_evaluate(cfg, out):
    _require(out, PREDICTIONS, "forecast")
    records, cells = _load_data(out)
    split = cfg.split()
    cell_ids, months, probability, _, _ = forecast_ensemble.read_predictions_csv(
        out / PREDICTIONS
    )
    timelines = _window_timelines(records, cells, (0, split.test[1]))
    by_cell = {tl.cell_id: tl for tl in timelines}
    test_months = split.months("test")
    test_mask = np.isin(months, test_months)
    if not test_mask.any():
        raise IngestError("predictions cover no test months")
    cell_ids = cell_ids[test_mask]
    months = months[test_mask]
    probability = probability[test_mask]
    labels = np.empty(len(cell_ids))
    for i, (cid, m) in enumerate(zip(cell_ids, months)):
        tl = by_cell.get(int(cid))
        if tl is None or not (tl.months[0] <= m <= tl.months[-1]):
            raise IngestError(f"no observed label for cell {cid} month {m}")
        labels[i] = 1.0 if tl.values[m - tl.months[0]] > 0 else 0.0

    calibration_month = split.test[0] - 1
    observed = sum(
        1
        for tl in timelines
        if tl.values[calibration_month - tl.months[0]] > 0
    )
    first_test = months == split.test[0]
    threshold = evaluation.calibrate_threshold(probability[first_test], observed)

    report = evaluation.build_report(
        cell_ids, months, probability, labels, test_months, threshold
    )
    report.save(out / EVALUATION)
    evaluation.write_pr_curve_csv(out / PR_CURVE, probability, labels)
    evaluation.write_roc_curve_csv(out / ROC_CURVE, probability, labels)
    monthly = evaluation.per_month_metrics(months, probability, labels, test_months)
    evaluation.write_per_month_csv(out / PER_MONTH, monthly)
    outputs = [EVALUATION, PR_CURVE, ROC_CURVE, PER_MONTH]
    for m in test_months:
        name = f"confusion_{int(m)}.csv"
        evaluation.write_confusion_raster_csv(
            out / name, cells, report.confusion, int(m)
        )
        outputs.append(name)
    _write_manifest(out, "evaluate", cfg, [PREDICTIONS, EVENTS], outputs)


STAGE_FUNCTIONS = {
    "synth": stage_synth,
    "ingest": stage_ingest,
    "fit-tce": stage_fit_tce,
    "fit-sce": stage_fit_sce,
    "fit-tsce": stage_fit_tsce,
    "features": stage_features,
    "select": stage_select,
    "train": stage_train,
    "forecast": stage_forecast,
    "evaluate": stage_evaluate,
}


def stage_pipeline(cfg, out):
    wanted = [s.strip() for s in cfg.stages.split(",") if s.strip()]
    unknown = [s for s in wanted if s not in PIPELINE_ORDER]
    if unknown:
        raise ConfigError(f"unknown pipeline stages: {unknown}")
    if cfg.synth:
        stage_synth(cfg, out)
    for name in PIPELINE_ORDER:
        if name in wanted:
            STAGE_FUNCTIONS[name](cfg, out)
    _write_manifest(out, "pipeline", cfg, [], [])


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="conflictcast", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("ingest", "synth", *PIPELINE_ORDER, "pipeline"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key = value settings file")
        p.add_argument("--jobs", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--horizon", type=int, default=None)
        p.add_argument("--out", default=None, help="artifact directory")
        p.add_argument("--events", default=None, help="source events CSV (ingest)")
    return parser


def resolve_config(args):
    cfg = read_config(args.config) if args.config else RunConfig()
    for flag in ("jobs", "seed", "horizon", "out", "events"):
        value = getattr(args, flag)
        if value is not None:
            setattr(cfg, flag, value)
    return cfg


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "pipeline":
            stage_pipeline(cfg, out)
        else:
            STAGE_FUNCTIONS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"conflictcast: {exc}", file=sys.stderr)
        return 1
    except (StageDependencyError, IngestError, UndefinedMetricError, ValueError) as exc:
        print(f"conflictcast: {exc}", file=sys.stderr)
        return 2
    except (SingularModelError, NonConvergenceError, np.linalg.LinAlgError) as exc:
        print(f"conflictcast: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
