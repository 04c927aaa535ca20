"""Trajectory dataset container and its CSV schema.

The on-disk schema is a comma-separated, UTF-8, LF file with header
``t,x,y,response[,<covariate>...]``: ``t`` the time stamp, ``(x, y)`` the
planar location, ``response`` the measurement (blank cell = unknown, kept
as a prediction target).  Rows are sorted by ``t``; readers auto-sort with
a warning and reject duplicate time stamps.
"""

from __future__ import annotations

import csv
import os
import tempfile
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataValidationError

REQUIRED_COLUMNS = ("t", "x", "y", "response")


@dataclass(frozen=True)
class TrajectoryDataset:
    """Time stamps, planar locations, responses and covariates for one subject.

    ``y`` may contain NaN: those rows are prediction targets, not data.
    """

    t: np.ndarray
    locations: np.ndarray
    y: np.ndarray
    X: np.ndarray
    covariates: tuple[str, ...] = ()

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        locations = np.asarray(self.locations, dtype=float).reshape(len(t), -1)
        y = np.asarray(self.y, dtype=float)
        X = np.asarray(self.X, dtype=float).reshape(len(t), -1)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "locations", locations)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        if not (len(t) == len(locations) == len(y) == len(X)):
            raise DataValidationError("dataset arrays must share their length")
        if len(t) == 0:
            raise DataValidationError("dataset is empty")
        if locations.shape[1] != 2:
            raise DataValidationError("locations must be planar (x, y) pairs")
        if not np.isfinite(t).all() or not np.isfinite(locations).all():
            raise DataValidationError("time stamps and locations must be finite")
        if not np.isfinite(X).all():
            raise DataValidationError("covariates must be finite")
        if not self.covariates and X.shape[1]:
            object.__setattr__(self, "covariates",
                               tuple(f"c{j + 1}" for j in range(X.shape[1])))
        if len(self.covariates) != X.shape[1]:
            raise DataValidationError("covariate names disagree with X columns")

    @property
    def n(self) -> int:
        return len(self.t)

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def observed_mask(self) -> np.ndarray:
        return np.isfinite(self.y)

    @property
    def target_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.observed_mask)

    def subset(self, idx) -> "TrajectoryDataset":
        idx = np.asarray(idx)
        return TrajectoryDataset(
            t=self.t[idx], locations=self.locations[idx], y=self.y[idx],
            X=self.X[idx], covariates=self.covariates,
        )

    def observed(self) -> "TrajectoryDataset":
        return self.subset(np.flatnonzero(self.observed_mask))

    def space_time_points(self) -> np.ndarray:
        """(n, 3) rows of [t, x, y] for the gneiting kernel."""
        return np.column_stack([self.t, self.locations])


def _parse_cell(value: str, column: str, row: int) -> float:
    text = value.strip()
    if text == "":
        if column == "response":
            return math.nan
        raise DataValidationError(f"row {row}: column {column!r} is empty")
    try:
        return float(text)
    except ValueError:
        raise DataValidationError(
            f"row {row}: malformed numeric cell {value!r} in column {column!r}"
        ) from None


def read_trajectory_csv(path) -> TrajectoryDataset:
    """Ingest the documented CSV schema; see the module docstring."""
    if not os.path.exists(path):
        raise DataValidationError(f"data file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataValidationError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        for col in REQUIRED_COLUMNS:
            if col not in header:
                raise DataValidationError(f"{path}: missing required column {col!r}")
        covariates = tuple(h for h in header if h not in REQUIRED_COLUMNS)
        pos = {name: header.index(name) for name in header}
        rows = []
        for i, raw in enumerate(reader, start=2):
            if not raw or all(not c.strip() for c in raw):
                continue
            if len(raw) != len(header):
                raise DataValidationError(
                    f"row {i}: expected {len(header)} cells, found {len(raw)}"
                )
            rows.append([_parse_cell(raw[pos[c]], c, i)
                         for c in REQUIRED_COLUMNS + covariates])
    if not rows:
        raise DataValidationError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=float)
    t = arr[:, 0]
    if len(np.unique(t)) != len(t):
        raise DataValidationError(f"{path}: duplicate time stamps are not allowed")
    order = np.argsort(t, kind="stable")
    if not np.array_equal(order, np.arange(len(t))):
        warnings.warn(f"{path}: rows were not sorted by t; auto-sorting", stacklevel=2)
        arr = arr[order]
    return TrajectoryDataset(
        t=arr[:, 0],
        locations=arr[:, 1:3],
        y=arr[:, 3],
        X=arr[:, 4:],
        covariates=covariates,
    )


def write_trajectory_csv(path, data: TrajectoryDataset) -> None:
    """Emit the dataset in the schema ``read_trajectory_csv`` accepts.

    Values are written with shortest round-trip formatting so an
    ingest -> emit -> ingest cycle is bit-identical; the file appears
    atomically (temp file + rename).
    """
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(list(REQUIRED_COLUMNS) + list(data.covariates))
            for i in range(data.n):
                response = "" if math.isnan(data.y[i]) else repr(float(data.y[i]))
                row = [repr(float(data.t[i])), repr(float(data.locations[i, 0])),
                       repr(float(data.locations[i, 1])), response]
                row += [repr(float(v)) for v in data.X[i]]
                writer.writerow(row)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
