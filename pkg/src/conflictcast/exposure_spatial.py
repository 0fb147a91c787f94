"""Tempo-spatial conflict exposure.

Stage one treats each month as an independent 2-d spatial field: a
single Matern-3/2 GP over cell centroids (decimal-degree Euclidean
distance), conditioned on that month's most conflict-affected cells and
evaluated at every grid cell.  One hyperparameter triple is shared by
all months.  Stage two chains the per-cell series of spatial posterior
means through the same two-trend temporal machinery used for direct
exposure, which is what lets spatial diffusion be extrapolated forward.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import gp_engine
from .data_model import Timeline, select_training_timelines
from .exposure_temporal import (
    TrendSurface,
    default_tce_model,
    extrapolate_tce,
    extrapolate_tce_all,
)
from .gp_engine import GPModel, HyperPrior, KernelSpec

SCE_HEADER = ["cell_id", "month_index", "mu_sce", "sigma_sce"]

DEFAULT_SUBSET_SIZE = 60

# a tempo-spatial trend surface has exactly the shape of a temporal one
TsceSurface = TrendSurface


@dataclass
class SpatialSurface:
    """One month's latent conflict field, defined at every grid cell."""

    month_index: int
    cell_ids: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.cell_ids = np.asarray(self.cell_ids, dtype=int)
        self.mu = np.asarray(self.mu, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        if not (len(self.cell_ids) == len(self.mu) == len(self.sigma)):
            raise ValueError("cell_ids, mu, sigma must align")


def cell_coordinates(cells):
    """(n, 2) array of (lon, lat) centroids in cell order."""
    return np.array([[c.lon, c.lat] for c in cells], dtype=float)


def default_sce_model():
    return GPModel((KernelSpec("matern32", 1.0, 0.5),), 0.5)


def spatial_prior():
    """Single-component prior bracketing sub-degree to few-degree fields."""
    return HyperPrior.single_default(lengthscale_log_mean=0.0, lengthscale_log_sd=1.0)


def _subset_indices(values, cell_ids, size):
    """Indices of the top-size cells by value, ascending cell_id on ties."""
    order = np.lexsort((cell_ids, -values))
    return np.sort(order[: min(size, len(values))])


def _month_problems(timelines, coords, subset_size):
    cell_ids = np.array([tl.cell_id for tl in timelines])
    values = np.vstack([tl.values for tl in timelines])
    months = timelines[0].months
    problems = []
    subsets = []
    for j in range(values.shape[1]):
        idx = _subset_indices(values[:, j], cell_ids, subset_size)
        problems.append((coords[idx], values[idx, j]))
        subsets.append(idx)
    return months, values, problems, subsets


def _check_aligned(timelines, cells):
    timelines = list(timelines)
    if not timelines:
        raise ValueError("no timelines given")
    if len(timelines) != len(cells) or any(
        tl.cell_id != c.cell_id for tl, c in zip(timelines, cells)
    ):
        raise ValueError("timelines must align one-to-one with cells")
    months = timelines[0].months
    for tl in timelines[1:]:
        if not np.array_equal(tl.months, months):
            raise ValueError("timelines must share one month grid")
    return timelines


def fit_sce(timelines, cells, subset_size=DEFAULT_SUBSET_SIZE, priors=None, n_starts=8, seed=0):
    """Fit one shared spatial Matern-3/2 triple across all training months.

    Each month contributes the marginal likelihood of its own top-subset
    conditioning set; the objective is the sum over months.
    """
    timelines = _check_aligned(timelines, cells)
    if priors is None:
        priors = spatial_prior()
    coords = cell_coordinates(cells)
    _, _, problems, _ = _month_problems(timelines, coords, subset_size)
    return gp_engine.map_estimate(
        default_sce_model(), priors, problems, n_starts=n_starts, seed=seed
    )


def estimate_sce_month(records, cells, model, subset_size=DEFAULT_SUBSET_SIZE, month=None):
    """Latent spatial field for one month from its records.

    records hold a single month (zero-fill is implicit: cells without a
    record enter the top-subset ranking with zero magnitude).  month is
    only needed when records is empty and cannot identify it.
    """
    months = {r.month_index for r in records}
    if len(months) > 1:
        raise ValueError(f"records span several months: {sorted(months)}")
    if months:
        month = months.pop()
    elif month is None:
        raise ValueError("empty records: pass month explicitly")
    cell_ids = np.array([c.cell_id for c in cells])
    values = np.zeros(len(cells))
    index = {c.cell_id: i for i, c in enumerate(cells)}
    for r in records:
        if r.cell_id not in index:
            raise ValueError(f"record for unknown cell {r.cell_id}")
        values[index[r.cell_id]] = r.magnitude
    coords = cell_coordinates(cells)
    idx = _subset_indices(values, cell_ids, subset_size)
    post = gp_engine.posterior(model, coords[idx], values[idx], coords)
    return SpatialSurface(month, cell_ids, post.mu_full, post.sigma_full)


def estimate_sce_all(timelines, cells, model, subset_size=DEFAULT_SUBSET_SIZE):
    """Spatial surfaces for every month of the aligned timelines."""
    timelines = _check_aligned(timelines, cells)
    coords = cell_coordinates(cells)
    cell_ids = np.array([c.cell_id for c in cells])
    months, values, problems, subsets = _month_problems(timelines, coords, subset_size)
    surfaces = []
    for j, month in enumerate(months):
        x, y = problems[j]
        post = gp_engine.posterior(model, x, y, coords)
        surfaces.append(SpatialSurface(int(month), cell_ids, post.mu_full, post.sigma_full))
    return surfaces


def sce_timelines(surfaces, cells):
    """Per-cell series of spatial posterior means, one Timeline per cell."""
    surfaces = sorted(surfaces, key=lambda s: s.month_index)
    months = np.array([s.month_index for s in surfaces])
    cell_ids = np.array([c.cell_id for c in cells])
    for s in surfaces:
        if not np.array_equal(s.cell_ids, cell_ids):
            raise ValueError(f"month {s.month_index}: cell set differs")
    matrix = np.vstack([s.mu for s in surfaces]).T  # (cells, months)
    return [Timeline(int(cid), months, matrix[i]) for i, cid in enumerate(cell_ids)]


def fit_tsce(
    sce_series,
    magnitude_timelines,
    priors=None,
    n_starts=8,
    seed=0,
    min_conflict_months=8,
    window_months=12,
):
    """Two-trend fit on spatial-mean series of conflict-active cells.

    Cell membership reuses the fatality-based timeline selection rule on
    magnitude_timelines; the corresponding sce_series rows become the
    training problems.
    """
    if priors is None:
        priors = HyperPrior.two_trend_default()
    selected = select_training_timelines(
        magnitude_timelines, min_conflict_months, window_months
    )
    keep = {tl.cell_id for tl in selected}
    chosen = [tl for tl in sce_series if tl.cell_id in keep]
    if not chosen:
        raise ValueError("selection rule kept no timelines")
    return gp_engine.map_estimate(
        default_tce_model(), priors, chosen, n_starts=n_starts, seed=seed
    )


def extrapolate_tsce(sce_timeline, model, horizon=36):
    """Extrapolated tempo-spatial trend for one cell's spatial-mean series."""
    return extrapolate_tce(sce_timeline, model, horizon)


def extrapolate_tsce_all(sce_series, model, horizon=36):
    return extrapolate_tce_all(sce_series, model, horizon)


def write_sce_csv(path, surfaces):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCE_HEADER)
        for s in sorted(surfaces, key=lambda s: s.month_index):
            for i, cid in enumerate(s.cell_ids):
                writer.writerow(
                    [int(cid), s.month_index, repr(float(s.mu[i])), repr(float(s.sigma[i]))]
                )


def read_sce_csv(path):
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SCE_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        for row in reader:
            rows.setdefault(int(row[1]), []).append((int(row[0]), float(row[2]), float(row[3])))
    surfaces = []
    for month, entries in sorted(rows.items()):
        entries.sort()
        cell_ids, mu, sigma = zip(*entries)
        surfaces.append(SpatialSurface(month, np.array(cell_ids), np.array(mu), np.array(sigma)))
    return surfaces


def write_raster_csv(path, cells, values):
    """One grid matrix keyed by (lat_row, lon_col); rows north to south."""
    lats = sorted({c.lat for c in cells}, reverse=True)
    lons = sorted({c.lon for c in cells})
    lookup = {(c.lat, c.lon): v for c, v in zip(cells, values)}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lat\\lon"] + [repr(float(lon)) for lon in lons])
        for lat in lats:
            row = [repr(float(lat))]
            for lon in lons:
                v = lookup.get((lat, lon))
                row.append("" if v is None else repr(float(v)))
            writer.writerow(row)
