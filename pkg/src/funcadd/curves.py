"""Curve containers, trapezoid quadrature, value scaling and CSV I/O."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import InputError, ParseError

logger = logging.getLogger(__name__)

_MISSING_TOKENS = {"", "na", "nan", "null"}


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Strictly increasing sample times inside [0, 1]."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 2:
            raise InputError("time grid needs at least 2 points")
        if not np.all(np.isfinite(pts)):
            raise InputError("time grid contains non-finite values")
        if np.any(np.diff(pts) <= 0):
            raise InputError("grid not increasing")
        if pts[0] < 0.0 or pts[-1] > 1.0:
            raise InputError("time grid must lie inside [0, 1]")
        object.__setattr__(self, "points", _frozen(pts))

    @classmethod
    def uniform(cls, size: int) -> "TimeGrid":
        return cls(np.linspace(0.0, 1.0, size))

    def __len__(self) -> int:
        return self.points.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, TimeGrid):
            return NotImplemented
        return np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash(self.points.tobytes())

    @property
    def weights(self) -> np.ndarray:
        """Composite trapezoid weights for integrating over the grid span."""
        return trapezoid_weights(self.points)


@dataclass(frozen=True, eq=False)
class FunctionalCurve:
    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (len(self.grid),):
            raise InputError(
                f"curve has {vals.size} values but the grid has {len(self.grid)} points"
            )
        if not np.all(np.isfinite(vals)):
            raise InputError("curve values must be finite")
        object.__setattr__(self, "values", _frozen(vals))

    def interpolate_to(self, grid: TimeGrid) -> "FunctionalCurve":
        """Linear interpolation onto ``grid``; constant extrapolation at the ends."""
        return FunctionalCurve(grid, np.interp(grid.points, self.grid.points, self.values))


@dataclass(frozen=True)
class ValueTransform:
    """Affine map of curve values onto [0, 1].

    ``kind='minmax'`` sends ``lo -> 0`` and ``hi -> 1``; anything outside
    ``[lo, hi]`` is clipped after mapping.
    """

    kind: str = "identity"
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if self.kind not in ("identity", "minmax"):
            raise InputError(f"unknown transform kind {self.kind!r}")
        if self.kind == "minmax" and not self.hi > self.lo:
            raise InputError("minmax transform requires hi > lo")

    @classmethod
    def fit(cls, values: np.ndarray) -> "ValueTransform":
        values = np.asarray(values, dtype=float)
        if values.size == 0:
            raise InputError("cannot fit a transform to no values")
        if not np.all(np.isfinite(values)):
            raise InputError("curve values must be finite")
        lo, hi = float(values.min()), float(values.max())
        if hi == lo:
            # degenerate pool: centre the single value at 0.5
            return cls("minmax", lo - 0.5, hi + 0.5)
        return cls("minmax", lo, hi)

    def apply(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if self.kind == "identity":
            return values.copy()
        return np.clip((values - self.lo) / (self.hi - self.lo), 0.0, 1.0)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "lo": self.lo, "hi": self.hi}

    @classmethod
    def from_dict(cls, d: dict) -> "ValueTransform":
        return cls(d.get("kind", "minmax"), float(d["lo"]), float(d["hi"]))


IDENTITY = ValueTransform()


@dataclass(frozen=True, eq=False)
class CurveDataset:
    """``n`` curves on one shared grid with their scalar responses.

    Values are held as an ``(n, p)`` array; ``transform`` records what has
    already been applied to them.
    """

    grid: TimeGrid
    values: np.ndarray
    responses: np.ndarray
    transform: ValueTransform = field(default=IDENTITY)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 1 and vals.size == 0:
            vals = vals.reshape(0, len(self.grid))
        if vals.ndim != 2 or vals.shape[1] != len(self.grid):
            raise InputError(
                f"values must have shape (n, {len(self.grid)}), got {vals.shape}"
            )
        resp = np.asarray(self.responses, dtype=float).reshape(-1)
        if resp.size != vals.shape[0]:
            raise InputError(
                f"{resp.size} responses for {vals.shape[0]} curves"
            )
        if not np.all(np.isfinite(vals)):
            raise InputError("curve values must be finite")
        object.__setattr__(self, "values", _frozen(vals))
        object.__setattr__(self, "responses", _frozen(resp))

    @classmethod
    def from_curves(
        cls,
        curves: Sequence[FunctionalCurve],
        responses,
        transform: ValueTransform = IDENTITY,
    ) -> "CurveDataset":
        if not curves:
            raise InputError("dataset needs at least one curve")
        grid = curves[0].grid
        for i, c in enumerate(curves):
            if c.grid != grid:
                raise InputError(f"curve {i} is on a different grid")
        return cls(grid, np.vstack([c.values for c in curves]), responses, transform)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.n

    @property
    def curves(self) -> list[FunctionalCurve]:
        return [FunctionalCurve(self.grid, row) for row in self.values]

    def subset(self, idx) -> "CurveDataset":
        idx = np.asarray(idx)
        return CurveDataset(self.grid, self.values[idx], self.responses[idx], self.transform)

    def interpolate_to(self, grid: TimeGrid) -> "CurveDataset":
        if grid == self.grid:
            return self
        vals = np.array([np.interp(grid.points, self.grid.points, row) for row in self.values])
        return CurveDataset(grid, vals.reshape(self.n, len(grid)), self.responses, self.transform)


def trapezoid_weights(points) -> np.ndarray:
    """Weights ``w`` with ``w @ f`` equal to the composite trapezoid rule."""
    pts = np.asarray(points, dtype=float)
    h = np.diff(pts)
    w = np.zeros_like(pts)
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    return w


def quadrature_1d(f_values, grid: TimeGrid) -> float:
    """Composite trapezoid integral of sampled ``f`` over the grid.

    Exact for integrands that are piecewise linear on the grid.
    """
    f = np.asarray(f_values, dtype=float)
    if f.shape != (len(grid),):
        raise InputError(f"{f.size} function values for a grid of {len(grid)} points")
    return float(grid.weights @ f)


def fit_transform(
    raw_curves: Union[Sequence[FunctionalCurve], np.ndarray],
) -> tuple:
    """Pool all curve values, fit a min-max transform and apply it.

    Returns the transformed curves (same container type as the input:
    a list of curves or an array) together with the fitted transform.
    """
    if isinstance(raw_curves, np.ndarray):
        if raw_curves.size == 0:
            raise InputError("fit_transform needs at least one curve")
        tf = ValueTransform.fit(raw_curves)
        return tf.apply(raw_curves), tf
    curves = list(raw_curves)
    if not curves:
        raise InputError("fit_transform needs at least one curve")
    tf = ValueTransform.fit(np.concatenate([c.values for c in curves]))
    return [FunctionalCurve(c.grid, tf.apply(c.values)) for c in curves], tf


# --- CSV ---------------------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _parse_cell(text: str, row: int, col: int, allow_missing: bool) -> float:
    token = text.strip()
    if token.lower() in _MISSING_TOKENS:
        if allow_missing:
            return math.nan
        raise ParseError(f"row {row}, column {col}: missing value")
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"row {row}, column {col}: non-numeric cell {token!r}") from None
    if not math.isfinite(value):
        raise ParseError(f"row {row}, column {col}: non-finite value {token!r}")
    return value


def _fill_gaps(row: np.ndarray, t: np.ndarray) -> np.ndarray:
    missing = np.isnan(row)
    if not missing.any():
        return row
    # np.interp holds the nearest observed value beyond the observed range
    return np.where(missing, np.interp(t, t[~missing], row[~missing]), row)


def read_csv_dataset(path, normalize_time: bool = False) -> CurveDataset:
    """Read the ``t, g1, ..., gp`` / ``Y, x1, ..., xp`` CSV layout.

    Empty or ``NA`` cells inside a curve are filled by linear interpolation
    (nearest value at the ends). With ``normalize_time`` the header grid is
    mapped affinely onto [0, 1] instead of being required to lie there.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise ParseError(f"{path}: empty file")
    header = rows[0]
    if header[0].strip() != "t":
        raise ParseError(f"{path}: row 1, column 1: expected 't', got {header[0]!r}")
    grid_vals = np.array(
        [_parse_cell(c, 1, j + 2, allow_missing=False) for j, c in enumerate(header[1:])]
    )
    if grid_vals.size < 2:
        raise ParseError(f"{path}: row 1: need at least 2 grid points")
    if np.any(np.diff(grid_vals) <= 0):
        raise ParseError(f"{path}: row 1: grid not increasing")
    if normalize_time:
        grid_vals = (grid_vals - grid_vals[0]) / (grid_vals[-1] - grid_vals[0])
    try:
        grid = TimeGrid(grid_vals)
    except InputError as exc:
        raise ParseError(f"{path}: row 1: {exc}") from None

    p = grid_vals.size
    ys, curves = [], []
    filled = 0
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != p + 1:
            raise ParseError(f"{path}: row {r}: expected {p + 1} columns, found {len(row)} (ragged row)")
        ys.append(_parse_cell(row[0], r, 1, allow_missing=False))
        vals = np.array([_parse_cell(c, r, j + 2, allow_missing=True) for j, c in enumerate(row[1:])])
        n_missing = int(np.isnan(vals).sum())
        if n_missing == p:
            raise ParseError(f"{path}: row {r}: curve has no observed values")
        if n_missing:
            filled += n_missing
            logger.info("row %d: filled %d missing value(s) by interpolation", r, n_missing)
            vals = _fill_gaps(vals, grid.points)
        curves.append(vals)
    if filled:
        logger.info("%s: filled %d missing value(s) in total", path, filled)
    values = np.array(curves).reshape(len(curves), p)
    return CurveDataset(grid, values, np.array(ys))


def write_csv_dataset(dataset: CurveDataset, path) -> None:
    """Write ``dataset`` with 17 significant digits (lossless for float64)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [_fmt(x) for x in dataset.grid.points])
        for y, row in zip(dataset.responses, dataset.values):
            w.writerow([_fmt(y)] + [_fmt(x) for x in row])


def stack_curves(curves: Iterable[FunctionalCurve], grid: TimeGrid, interp: bool = False) -> np.ndarray:
    """Stack curves into an ``(n, p)`` array on ``grid``, interpolating if allowed."""
    rows = []
    for i, c in enumerate(curves):
        if c.grid != grid:
            if not interp:
                raise InputError(f"curve {i} is not on the training grid (use interpolation)")
            c = c.interpolate_to(grid)
        rows.append(c.values)
    return np.array(rows).reshape(len(rows), len(grid))
