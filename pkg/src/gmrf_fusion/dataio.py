"""CSV ingestion of station, grid and target tables with covariate transforms."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import DataError, ObservationSet

__all__ = [
    "ValidationError",
    "CovariateSpec",
    "read_table",
    "read_observations",
    "read_targets",
    "apply_covariates",
    "write_rows",
    "fmt",
]

STATION_COLUMNS = ("station_id", "x", "y", "t", "value")
GRID_COLUMNS = ("cell_id", "x", "y", "t", "value")
TARGET_COLUMNS = ("id", "x", "y", "t")
TRANSFORMS = ("identity", "log", "log1p", "square", "interaction")


class ValidationError(DataError):
    """Malformed input file or configuration."""


def fmt(v) -> str:
    """Stable text form of a number for CSV output."""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "" if math.isnan(v) else repr(v)


@dataclass(frozen=True)
class CovariateSpec:
    """One design column built from raw table columns.

    ``transform`` is one of ``identity``, ``log``, ``log1p`` (``log(x+1)``),
    ``square`` or ``interaction`` (product of all ``source`` columns).
    """

    name: str
    source: tuple
    transform: str = "identity"

    def __post_init__(self):
        src = (self.source,) if isinstance(self.source, str) else tuple(self.source)
        object.__setattr__(self, "source", src)
        if self.transform not in TRANSFORMS:
            raise ValidationError(f"unknown covariate transform {self.transform!r}")
        if self.transform == "interaction" and len(src) < 2:
            raise ValidationError(f"interaction {self.name!r} needs at least two source columns")
        if self.transform != "interaction" and len(src) != 1:
            raise ValidationError(f"covariate {self.name!r} takes exactly one source column")

    @classmethod
    def from_dict(cls, d: dict) -> "CovariateSpec":
        unknown = set(d) - {"name", "source", "transform"}
        if unknown:
            raise ValidationError(f"unknown covariate keys {sorted(unknown)}")
        return cls(d["name"], d.get("source", d["name"]), d.get("transform", "identity"))


def read_table(path, required, numeric, label=None) -> dict:
    """Read a CSV file into column arrays.

    Empty cells become NaN in numeric columns. Parse errors name the file
    and the 1-based line number.
    """
    path = Path(path)
    label = label or path.name
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        try:
            header = [h.strip() for h in next(rd)]
        except StopIteration:
            raise ValidationError(f"{label}: empty file") from None
        missing = [c for c in required if c not in header]
        if missing:
            raise ValidationError(f"{label}: missing columns {missing}")
        if len(set(header)) != len(header):
            raise ValidationError(f"{label}: duplicate column names")
        cols = {h: [] for h in header}
        for lineno, row in enumerate(rd, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValidationError(f"{label} line {lineno}: expected {len(header)} fields, got {len(row)}")
            for h, cell in zip(header, row):
                cols[h].append((cell.strip(), lineno))
    out = {}
    for h, cells in cols.items():
        if h in numeric:
            vals = np.empty(len(cells))
            for i, (cell, lineno) in enumerate(cells):
                if cell == "":
                    vals[i] = np.nan
                    continue
                try:
                    vals[i] = float(cell)
                except ValueError:
                    raise ValidationError(f"{label} line {lineno}: column {h!r} is not numeric: {cell!r}") from None
            out[h] = vals
        else:
            out[h] = np.array([c for c, _ in cells], dtype=object)
    out["_line"] = np.array([ln for _, ln in cols[header[0]]], int) if header else np.zeros(0, int)
    return out


def _time_index(tab, label):
    t = tab["t"]
    bad = ~np.isfinite(t) | (t != np.round(t))
    if np.any(bad):
        raise ValidationError(f"{label} line {tab['_line'][np.flatnonzero(bad)[0]]}: t must be an integer")
    return t.astype(np.int64)


def _coords(tab, label):
    xy = np.column_stack([tab["x"], tab["y"]])
    bad = ~np.all(np.isfinite(xy), axis=1)
    if np.any(bad):
        raise ValidationError(f"{label} line {tab['_line'][np.flatnonzero(bad)[0]]}: missing coordinate")
    return xy


def apply_covariates(tab: dict, specs, label="table") -> np.ndarray:
    """Design columns (without intercept) for ``specs``."""
    n = len(tab["_line"])
    Z = np.empty((n, len(specs)))
    for j, s in enumerate(specs):
        for c in s.source:
            if c not in tab:
                raise ValidationError(f"{label}: covariate source column {c!r} not found")
        if s.transform == "interaction":
            v = np.prod([tab[c] for c in s.source], axis=0)
        else:
            x = tab[s.source[0]]
            with np.errstate(divide="ignore", invalid="ignore"):
                if s.transform == "log":
                    v = np.where(x > 0, np.log(np.where(x > 0, x, 1.0)), np.nan)
                elif s.transform == "log1p":
                    v = np.where(x > -1, np.log1p(np.where(x > -1, x, 0.0)), np.nan)
                elif s.transform == "square":
                    v = x**2
                else:
                    v = x
        bad = ~np.isfinite(v)
        if np.any(bad):
            ln = tab["_line"][np.flatnonzero(bad)[0]]
            raise ValidationError(f"{label} line {ln}: covariate {s.name!r} is missing or outside the domain of {s.transform}")
        Z[:, j] = v
    return Z


def _numeric_sources(specs):
    return {c for s in specs for c in s.source}


def read_observations(stations_path, grid_path=None, covariates=(), unit="degrees", intercept=True) -> ObservationSet:
    """Build an :class:`ObservationSet` from station and grid CSV files.

    Empty ``value`` cells are missing observations; a grid file with only
    a header means no gridded data.
    """
    specs = tuple(covariates)
    num = {"x", "y", "t", "value"} | _numeric_sources(specs)
    st = read_table(stations_path, STATION_COLUMNS, num, "stations")
    if len(st["_line"]) == 0:
        raise ValidationError("stations: empty observation set")
    st_t = _time_index(st, "stations")
    st_xy = _coords(st, "stations")
    st_z = apply_covariates(st, specs, "stations")
    kw = {}
    if grid_path is not None:
        gr = read_table(grid_path, GRID_COLUMNS, num, "grid")
        if len(gr["_line"]):
            kw = dict(
                grid_id=gr["cell_id"].astype(str),
                grid_xy=_coords(gr, "grid"),
                grid_t=_time_index(gr, "grid"),
                grid_value=gr["value"],
                grid_z=apply_covariates(gr, specs, "grid"),
            )
    try:
        return ObservationSet(
            station_id=st["station_id"].astype(str),
            station_xy=st_xy,
            station_t=st_t,
            station_value=st["value"],
            station_z=st_z,
            covariate_names=tuple(s.name for s in specs),
            intercept=intercept,
            unit=unit,
            **kw,
        )
    except DataError as exc:
        raise ValidationError(str(exc)) from exc


def read_targets(path, covariates=()) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Target ids, coordinates, times, covariates and source line numbers."""
    specs = tuple(covariates)
    tab = read_table(path, TARGET_COLUMNS, {"x", "y", "t"} | _numeric_sources(specs), "targets")
    return (
        tab["id"].astype(str),
        _coords(tab, "targets"),
        _time_index(tab, "targets"),
        apply_covariates(tab, specs, "targets"),
        tab["_line"],
    )


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([c if isinstance(c, str) else fmt(c) for c in r])
