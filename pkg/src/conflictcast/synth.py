"""Synthetic gridded conflict data from the generative model itself.

Each cell receives an independent two-trend temporal draw (long
squared-exponential plus short Matern-3/2), scaled by a positive
spatial modulation field drawn once over the cell centroids.  Observed
log-magnitudes add white noise on top of the latent trend and
fatalities come back through the inverse of the ingest transform:
fatalities = round(exp(y) - 1) clamped at zero.  Everything is
deterministic in the seed, with a documented draw order: the spatial
field first, then the cells' long and short trends in ascending
cell_id order, then the emission noise.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import gp_engine
from .data_model import CellMonthRecord, GridCell
from .gp_engine import GPModel, KernelSpec

TRUTH_HEADER = [
    "cell_id",
    "month_index",
    "latent",
    "latent_long",
    "latent_short",
    "y_noisy",
]

_LATENT_NOISE = 1e-6  # keeps the latent draws effectively noise-free

_SPATIAL_STREAM = 0
_LONG_STREAM = 1
_SHORT_STREAM = 2
_EMISSION_STREAM = 3


@dataclass(frozen=True)
class SynthConfig:
    """Grid geometry, true hyperparameters, and the emission link."""

    grid_rows: int = 20
    grid_cols: int = 20
    months: int = 372
    l_long: float = 120.0
    eta_long: float = 0.5
    l_short: float = 4.0
    eta_short: float = 0.3
    noise: float = 0.5
    l_spatial: float = 0.8
    eta_spatial: float = 0.6
    noise_spatial: float = 0.05
    link_scale: float = 1.0
    link_offset: float = 0.0
    lat0: float = -5.0
    lon0: float = 25.0
    spacing: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.grid_rows < 2 or self.grid_cols < 2:
            raise ValueError("grid must be at least 2 x 2")
        if self.months < 24:
            raise ValueError("months must be >= 24")
        positive = (
            "l_long", "eta_long", "l_short", "eta_short", "noise",
            "l_spatial", "eta_spatial", "noise_spatial", "spacing",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self):
        return {name: getattr(self, name) for name in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class SynthTruth:
    """Latent arrays underlying a generated dataset, one row per cell."""

    cells: list
    months: np.ndarray
    latent: np.ndarray
    latent_long: np.ndarray
    latent_short: np.ndarray
    y_noisy: np.ndarray
    modulation: np.ndarray


def grid_cells(config):
    """Row-major centroids: cell_id = row * cols + col."""
    cells = []
    for row in range(config.grid_rows):
        for col in range(config.grid_cols):
            cells.append(
                GridCell(
                    row * config.grid_cols + col,
                    config.lat0 + row * config.spacing,
                    config.lon0 + col * config.spacing,
                )
            )
    return cells


def _long_model(config):
    return GPModel(
        (KernelSpec("se", config.l_long, config.eta_long),), _LATENT_NOISE
    )


def _short_model(config):
    return GPModel(
        (KernelSpec("matern32", config.l_short, config.eta_short),), _LATENT_NOISE
    )


def _spatial_model(config):
    return GPModel(
        (KernelSpec("matern32", config.l_spatial, config.eta_spatial),),
        config.noise_spatial,
    )


def generate(config):
    """Sample (records, cells, truth) from the configured model.

    Records list only cell-months with at least one fatality, matching
    what an event feed would carry; truth keeps the full latent arrays
    for recovery oracles.
    """
    cells = grid_cells(config)
    months = np.arange(config.months)
    coords = np.array([[c.lon, c.lat] for c in cells])

    g = gp_engine.sample_prior(
        _spatial_model(config), coords, [config.seed, _SPATIAL_STREAM]
    )
    modulation = np.exp(g)

    n = len(cells)
    latent_long = np.empty((n, config.months))
    latent_short = np.empty((n, config.months))
    long_model = _long_model(config)
    short_model = _short_model(config)
    for cell in cells:
        cid = cell.cell_id
        f_long = gp_engine.sample_prior(
            long_model, months, [config.seed, _LONG_STREAM, cid]
        )
        f_short = gp_engine.sample_prior(
            short_model, months, [config.seed, _SHORT_STREAM, cid]
        )
        scale = config.link_scale * modulation[cid]
        latent_long[cid] = scale * f_long
        latent_short[cid] = scale * f_short

    latent = config.link_offset + latent_long + latent_short
    rng = np.random.default_rng([config.seed, _EMISSION_STREAM])
    y_noisy = latent + config.noise * rng.standard_normal(latent.shape)
    fatalities = np.rint(np.expm1(y_noisy))
    fatalities = np.where(fatalities > 0, fatalities, 0).astype(np.int64)

    records = []
    for cell in cells:
        for t in range(config.months):
            f = int(fatalities[cell.cell_id, t])
            if f > 0:
                records.append(CellMonthRecord(cell.cell_id, t, f))
    truth = SynthTruth(
        cells=cells,
        months=months,
        latent=latent,
        latent_long=latent_long,
        latent_short=latent_short,
        y_noisy=y_noisy,
        modulation=modulation,
    )
    return records, cells, truth


def write_truth_csv(path, truth):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRUTH_HEADER)
        for cell in truth.cells:
            cid = cell.cell_id
            for t in range(len(truth.months)):
                writer.writerow(
                    [
                        cid,
                        int(truth.months[t]),
                        repr(float(truth.latent[cid, t])),
                        repr(float(truth.latent_long[cid, t])),
                        repr(float(truth.latent_short[cid, t])),
                        repr(float(truth.y_noisy[cid, t])),
                    ]
                )


def read_truth_csv(path):
    """Back to dense arrays keyed by (cell order, month order) of the file."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRUTH_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        for row in reader:
            rows.append(
                (int(row[0]), int(row[1]), float(row[2]), float(row[3]),
                 float(row[4]), float(row[5]))
            )
    cell_ids = sorted({r[0] for r in rows})
    month_ids = sorted({r[1] for r in rows})
    cpos = {c: i for i, c in enumerate(cell_ids)}
    mpos = {m: i for i, m in enumerate(month_ids)}
    shape = (len(cell_ids), len(month_ids))
    latent = np.zeros(shape)
    latent_long = np.zeros(shape)
    latent_short = np.zeros(shape)
    y_noisy = np.zeros(shape)
    for cid, m, la, ll, ls, yn in rows:
        i, j = cpos[cid], mpos[m]
        latent[i, j] = la
        latent_long[i, j] = ll
        latent_short[i, j] = ls
        y_noisy[i, j] = yn
    return {
        "cell_ids": np.array(cell_ids),
        "months": np.array(month_ids),
        "latent": latent,
        "latent_long": latent_long,
        "latent_short": latent_short,
        "y_noisy": y_noisy,
    }
