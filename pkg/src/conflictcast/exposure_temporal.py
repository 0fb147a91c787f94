"""Temporal conflict exposure: two-trend GP fits per cell and extrapolation.

Each selected cell's magnitude timeline is explained by a slow
squared-exponential trend plus a fast Matern-3/2 trend sharing one
hyperparameter set across cells.  Extrapolation evaluates the posterior
over the training months plus a fixed future horizon; the additive
decomposition gives the long and short trend surfaces separately.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import gp_engine
from .data_model import Timeline
from .gp_engine import GPModel, HyperPrior, KernelSpec

TREND_HEADER = ["cell_id", "month_index", "mu_full", "mu_long", "mu_short", "sigma"]

DEFAULT_HORIZON = 36


@dataclass
class TrendSurface:
    """Per-cell posterior trend over training months plus the horizon."""

    cell_id: int
    months: np.ndarray
    mu_full: np.ndarray
    mu_long: np.ndarray
    mu_short: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.months = np.asarray(self.months, dtype=int)
        n = len(self.months)
        for name in ("mu_full", "mu_long", "mu_short", "sigma"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (n,):
                raise ValueError(f"{name} misaligned with months")
            setattr(self, name, arr)


def default_tce_model():
    """Two-trend template at the prior modes (long SE, short Matern-3/2)."""
    return GPModel(
        (KernelSpec("se", 100.0, 0.5), KernelSpec("matern32", 5.0, 0.5)), 0.5
    )


def fit_tce(timelines, priors=None, n_starts=8, seed=0):
    """MAP-fit shared two-trend hyperparameters on magnitude timelines.

    timelines should already be restricted to training months and to the
    cells passing the conflict-months selection rule.
    """
    if priors is None:
        priors = HyperPrior.two_trend_default()
    return gp_engine.map_estimate(
        default_tce_model(), priors, list(timelines), n_starts=n_starts, seed=seed
    )


def _query_months(months, horizon):
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    last = int(months[-1])
    return np.arange(int(months[0]), last + horizon + 1)


def extrapolate_tce(timeline, model, horizon=DEFAULT_HORIZON):
    """Posterior trend surface for one cell.

    The timeline must cover the training window only; the posterior is
    evaluated at every training month and horizon months beyond.  An
    all-zero timeline short-circuits to an exactly zero mean.  Adding
    horizon months never changes the surface at the training months.
    """
    query = _query_months(timeline.months, horizon)
    if not np.any(timeline.values != 0.0):
        sigma = _latent_sigma(model, timeline.months, query)
        zero = np.zeros(len(query))
        return TrendSurface(timeline.cell_id, query, zero, zero.copy(), zero.copy(), sigma)
    post = gp_engine.posterior(model, timeline.months, timeline.values, query)
    return TrendSurface(
        timeline.cell_id,
        query,
        post.mu_full,
        post.mu_components[0],
        post.mu_components[1],
        post.sigma_full,
    )


def _latent_sigma(model, x_train, query):
    return gp_engine.latent_sigma(model, np.asarray(x_train, dtype=float), query)


def extrapolate_tce_all(timelines, model, horizon=DEFAULT_HORIZON):
    """Trend surfaces for many cells sharing one training grid.

    One factorization serves every cell; all-zero cells skip the solve
    entirely.  Equivalent to mapping extrapolate_tce over the timelines.
    """
    timelines = list(timelines)
    if not timelines:
        return []
    months = timelines[0].months
    for tl in timelines[1:]:
        if not np.array_equal(tl.months, months):
            raise ValueError("timelines must share one training month grid")
    query = _query_months(months, horizon)
    values = np.vstack([tl.values for tl in timelines])
    nonzero = np.flatnonzero(np.any(values != 0.0, axis=1))
    mu_full = np.zeros((len(timelines), len(query)))
    mu_long = np.zeros_like(mu_full)
    mu_short = np.zeros_like(mu_full)
    if len(nonzero):
        full, comps, sigma = gp_engine.posterior_many(
            model, months, values[nonzero], query
        )
        mu_full[nonzero] = full
        mu_long[nonzero] = comps[0]
        mu_short[nonzero] = comps[1]
    else:
        sigma = _latent_sigma(model, months, query)
    return [
        TrendSurface(tl.cell_id, query, mu_full[i], mu_long[i], mu_short[i], sigma.copy())
        for i, tl in enumerate(timelines)
    ]


def signal_horizon(lengthscale):
    """Months until a trend's influence fades to kernel scale.

    The fitted lengthscale is itself the natural persistence scale of a
    stationary kernel, so this is the identity on positive input; it
    exists to give the quantity a name at call sites.
    """
    if not lengthscale > 0:
        raise ValueError("lengthscale must be positive")
    return lengthscale


def write_trend_csv(path, surfaces):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TREND_HEADER)
        for s in sorted(surfaces, key=lambda s: s.cell_id):
            for i, month in enumerate(s.months):
                writer.writerow(
                    [
                        s.cell_id,
                        int(month),
                        repr(float(s.mu_full[i])),
                        repr(float(s.mu_long[i])),
                        repr(float(s.mu_short[i])),
                        repr(float(s.sigma[i])),
                    ]
                )


def read_trend_csv(path):
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TREND_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        for row in reader:
            cell = int(row[0])
            rows.setdefault(cell, []).append(
                (int(row[1]), float(row[2]), float(row[3]), float(row[4]), float(row[5]))
            )
    surfaces = []
    for cell, entries in sorted(rows.items()):
        entries.sort()
        months, mu_full, mu_long, mu_short, sigma = zip(*entries)
        surfaces.append(
            TrendSurface(
                cell,
                np.array(months),
                np.array(mu_full),
                np.array(mu_long),
                np.array(mu_short),
                np.array(sigma),
            )
        )
    return surfaces


def timelines_from_columns(cell_ids, months, value_matrix):
    """Build Timelines from a dense (cells x months) value matrix."""
    return [
        Timeline(cid, months, value_matrix[i]) for i, cid in enumerate(cell_ids)
    ]
