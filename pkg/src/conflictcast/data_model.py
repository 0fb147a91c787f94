"""Gridded monthly event data: ingestion, transforms, timelines, subsets.

The unit of observation is a (cell, month) pair on a regular lat/lon grid
with a 0-based month index.  Fatality counts are mapped to a log magnitude
before any model sees them; the binary event indicator is derived from the
raw count.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

EVENT_HEADER = ["cell_id", "month_index", "lat", "lon", "fatalities"]


class IngestError(ValueError):
    """Malformed or inconsistent input data; messages carry row numbers."""


@dataclass(frozen=True)
class GridCell:
    cell_id: int
    lat: float
    lon: float

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0):
            raise IngestError(f"cell {self.cell_id}: lat {self.lat} outside [-90, 90]")
        if not (-180.0 <= self.lon <= 180.0):
            raise IngestError(f"cell {self.cell_id}: lon {self.lon} outside [-180, 180]")


@dataclass(frozen=True)
class CellMonthRecord:
    """One observed cell-month. magnitude/target are derived, never stored raw."""

    cell_id: int
    month_index: int
    fatalities: int
    magnitude: float = field(init=False)
    target: bool = field(init=False)

    def __post_init__(self):
        if self.fatalities < 0:
            raise IngestError(
                f"cell {self.cell_id} month {self.month_index}: negative fatalities"
            )
        object.__setattr__(self, "magnitude", magnitude_transform(self.fatalities))
        object.__setattr__(self, "target", self.fatalities > 0)


def magnitude_transform(fatalities):
    """ln(1 + fatalities); damps heavy tails so a 0->100 jump outweighs 1000->1100."""
    if fatalities < 0:
        raise ValueError("fatalities must be non-negative")
    return math.log1p(fatalities)


def binary_target(fatalities):
    """1 if any fatality occurred, else 0."""
    if fatalities < 0:
        raise ValueError("fatalities must be non-negative")
    return 1 if fatalities > 0 else 0


@dataclass
class Timeline:
    """Dense per-cell series over a contiguous month window.

    values holds magnitudes (or any per-month signal, e.g. a spatial
    posterior mean when chaining models).  months is always contiguous
    and aligned with values.
    """

    cell_id: int
    months: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.months = np.asarray(self.months, dtype=int)
        self.values = np.asarray(self.values, dtype=float)
        if self.months.ndim != 1 or self.months.shape != self.values.shape:
            raise ValueError("months and values must be aligned 1-d arrays")
        if len(self.months) and not np.array_equal(
            self.months, np.arange(self.months[0], self.months[0] + len(self.months))
        ):
            raise ValueError(f"cell {self.cell_id}: months must be contiguous")

    def conflict_mask(self):
        # magnitudes are ln(1+fatalities), so >0 iff fatalities>0
        return self.values > 0.0


def ingest_events(path, window=None):
    """Read an event CSV into (records, cells).

    The file must carry the header cell_id,month_index,lat,lon,fatalities.
    Malformed rows, duplicate (cell, month) pairs, negative fatalities and
    inconsistent centroids are rejected with the offending row number
    (header = row 1).  When window=(lo, hi) is given, any month outside it
    is rejected the same way.
    """
    records = []
    cells = {}
    seen = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(f"{path}: empty file (missing header)")
        if [h.strip() for h in header] != EVENT_HEADER:
            raise IngestError(
                f"{path} row 1: expected header {','.join(EVENT_HEADER)}, "
                f"got {','.join(header)}"
            )
        for rownum, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 5:
                raise IngestError(f"{path} row {rownum}: expected 5 fields, got {len(row)}")
            try:
                cell_id = int(row[0])
                month = int(row[1])
                lat = float(row[2])
                lon = float(row[3])
                fatalities = int(row[4])
            except ValueError as exc:
                raise IngestError(f"{path} row {rownum}: {exc}") from None
            if fatalities < 0:
                raise IngestError(f"{path} row {rownum}: negative fatalities")
            if window is not None and not (window[0] <= month <= window[1]):
                raise IngestError(
                    f"{path} row {rownum}: month {month} outside window "
                    f"{window[0]}..{window[1]}"
                )
            key = (cell_id, month)
            if key in seen:
                raise IngestError(
                    f"{path} row {rownum}: duplicate cell {cell_id} month {month} "
                    f"(first at row {seen[key]})"
                )
            seen[key] = rownum
            if cell_id in cells:
                known = cells[cell_id]
                if known.lat != lat or known.lon != lon:
                    raise IngestError(
                        f"{path} row {rownum}: cell {cell_id} centroid "
                        f"({lat}, {lon}) conflicts with earlier ({known.lat}, {known.lon})"
                    )
            else:
                cells[cell_id] = GridCell(cell_id, lat, lon)
            try:
                records.append(CellMonthRecord(cell_id, month, fatalities))
            except IngestError as exc:
                raise IngestError(f"{path} row {rownum}: {exc}") from None
    cell_list = sorted(cells.values(), key=lambda c: c.cell_id)
    return records, cell_list


def write_events(path, records, cells):
    """Inverse of ingest_events; rows sorted by (cell_id, month_index)."""
    coords = {c.cell_id: c for c in cells}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVENT_HEADER)
        for rec in sorted(records, key=lambda r: (r.cell_id, r.month_index)):
            cell = coords[rec.cell_id]
            writer.writerow([rec.cell_id, rec.month_index, cell.lat, cell.lon, rec.fatalities])


def build_timelines(records, cells, window):
    """Dense magnitude timelines over window=(first, last), one per cell.

    Missing cell-months are zero-filled; cells with no records at all get
    all-zero timelines.  Records for unknown cells or months outside the
    window are errors.
    """
    lo, hi = int(window[0]), int(window[1])
    if hi < lo:
        raise ValueError(f"bad window {window}")
    months = np.arange(lo, hi + 1)
    order = {c.cell_id: i for i, c in enumerate(cells)}
    values = np.zeros((len(cells), len(months)))
    for rec in records:
        if rec.cell_id not in order:
            raise IngestError(f"record for unknown cell {rec.cell_id}")
        if not (lo <= rec.month_index <= hi):
            raise IngestError(
                f"cell {rec.cell_id}: month {rec.month_index} outside window {lo}..{hi}"
            )
        values[order[rec.cell_id], rec.month_index - lo] = rec.magnitude
    return [Timeline(c.cell_id, months, values[i]) for i, c in enumerate(cells)]


def select_training_timelines(timelines, min_conflict_months=8, window_months=12):
    """Keep timelines with >= min_conflict_months conflict months inside any
    contiguous window_months-month window.

    Callers restrict the timelines to training months before selecting;
    nothing after the training window may influence membership.
    """
    if min_conflict_months < 1 or window_months < min_conflict_months:
        raise ValueError("need 1 <= min_conflict_months <= window_months")
    kept = []
    for tl in timelines:
        mask = tl.conflict_mask().astype(int)
        if len(mask) < window_months:
            # window longer than the series: a single truncated window
            if int(mask.sum()) >= min_conflict_months:
                kept.append(tl)
            continue
        counts = np.convolve(mask, np.ones(window_months, dtype=int), mode="valid")
        if counts.max(initial=0) >= min_conflict_months:
            kept.append(tl)
    return kept


def select_spatial_subset(records, n=60):
    """Top-n records of one month by magnitude, ascending cell_id on ties.

    Zero-magnitude cells fill the subset when fewer than n cells saw
    conflict.  Mixing months is an error.
    """
    if n < 1:
        raise ValueError("subset size must be >= 1")
    months = {r.month_index for r in records}
    if len(months) > 1:
        raise ValueError(f"records span several months: {sorted(months)}")
    ranked = sorted(records, key=lambda r: (-r.magnitude, r.cell_id))
    return ranked[:n]


def _parse_range(text):
    lo, sep, hi = text.partition("..")
    if not sep:
        raise ValueError(f"range {text!r} must look like 0..299")
    return int(lo), int(hi)


@dataclass(frozen=True)
class SplitSpec:
    """Inclusive train/validation/test month ranges, disjoint and ordered."""

    train: tuple
    validation: tuple
    test: tuple

    def __post_init__(self):
        for name, (lo, hi) in zip(
            ("train", "validation", "test"), (self.train, self.validation, self.test)
        ):
            if hi < lo:
                raise ValueError(f"{name} range {lo}..{hi} is empty")
        if not (self.train[1] < self.validation[0] and self.validation[1] < self.test[0]):
            raise ValueError("ranges must be disjoint and ordered train < validation < test")

    @classmethod
    def from_text(cls, text, source="<split>"):
        """Parse a key-value split description (train = 0..299 style)."""
        found = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{source} line {lineno}: expected key = value")
            key = key.strip()
            if key not in ("train", "validation", "test"):
                raise ValueError(f"{source} line {lineno}: unknown key {key!r}")
            try:
                found[key] = _parse_range(value.strip())
            except ValueError as exc:
                raise ValueError(f"{source} line {lineno}: {exc}") from None
        missing = [k for k in ("train", "validation", "test") if k not in found]
        if missing:
            raise ValueError(f"{source}: missing ranges: {', '.join(missing)}")
        return cls(found["train"], found["validation"], found["test"])

    @classmethod
    def read(cls, path):
        with open(path) as fh:
            return cls.from_text(fh.read(), source=str(path))

    def months(self, part):
        lo, hi = getattr(self, part)
        return np.arange(lo, hi + 1)
