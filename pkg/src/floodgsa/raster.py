"""Regular-grid rasters: geometry, ASCII grid I/O, resampling, point sampling.

The on-disk format is the plain-text ASCII grid: six header lines (ncols,
nrows, xllcorner, yllcorner, cellsize, NODATA_value) followed by nrows rows
of ncols space-separated values, top row first. Values are written with six
significant digits, so one write/read cycle is idempotent.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    OutOfExtentError,
    RasterParseError,
    UnsupportedResolutionError,
    ValidationError,
)

DEFAULT_NODATA = -9999.0
VALUE_FORMAT = "%.6g"   # raster files carry 6 significant digits
EXACT_FORMAT = "%.17g"  # lossless variant used by hot-start files

_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


@dataclass(frozen=True)
class GridGeometry:
    """Square-celled regular grid anchored at its lower-left corner (meters)."""

    ncols: int
    nrows: int
    x_origin: float = 0.0
    y_origin: float = 0.0
    cell_size: float = 1.0
    nodata_value: float = DEFAULT_NODATA

    def __post_init__(self):
        if self.ncols < 1 or self.nrows < 1:
            raise ValidationError(f"grid must be at least 1x1, got {self.ncols}x{self.nrows}")
        if not self.cell_size > 0:
            raise ValidationError(f"cell_size must be positive, got {self.cell_size}")

    def compatible(self, other: "GridGeometry") -> bool:
        """True if arithmetic between rasters on the two grids is meaningful.

        All fields except the nodata sentinel must match.
        """
        return (
            self.ncols == other.ncols
            and self.nrows == other.nrows
            and self.x_origin == other.x_origin
            and self.y_origin == other.y_origin
            and self.cell_size == other.cell_size
        )

    @property
    def width(self) -> float:
        return self.ncols * self.cell_size

    @property
    def height(self) -> float:
        return self.nrows * self.cell_size

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) of the closed grid extent."""
        return (
            self.x_origin,
            self.y_origin,
            self.x_origin + self.width,
            self.y_origin + self.height,
        )

    def contains(self, x: float, y: float) -> bool:
        xmin, ymin, xmax, ymax = self.extent
        return xmin <= x <= xmax and ymin <= y <= ymax

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        """(row, col) of the cell containing the point; row 0 is the top row.

        Points exactly on an interior cell edge belong to the cell of higher
        row/column index. Points on the domain boundary belong to the nearest
        valid cell.
        """
        if not self.contains(x, y):
            raise OutOfExtentError([f"({x:g}, {y:g})"])
        tx = (x - self.x_origin) / self.cell_size
        col = min(int(math.floor(tx)), self.ncols - 1)
        ty = (y - self.y_origin) / self.cell_size
        b = int(math.floor(ty))  # row index counted from the bottom
        if b > 0 and ty == b:
            b -= 1  # interior horizontal edge -> cell below (higher row index)
        b = min(b, self.nrows - 1)
        return self.nrows - 1 - b, col

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        x = self.x_origin + (col + 0.5) * self.cell_size
        y = self.y_origin + (self.nrows - row - 0.5) * self.cell_size
        return x, y

    def x_centers(self) -> np.ndarray:
        return self.x_origin + (np.arange(self.ncols) + 0.5) * self.cell_size

    def y_centers(self) -> np.ndarray:
        """Cell-center y coordinates indexed by array row (top row first)."""
        return self.y_origin + (self.nrows - np.arange(self.nrows) - 0.5) * self.cell_size


@dataclass(frozen=True)
class Raster:
    """Immutable 2D field of values on a :class:`GridGeometry`.

    ``values`` has shape (nrows, ncols) with row 0 the northernmost row,
    matching the file layout. Cells equal to the nodata sentinel are
    excluded from statistics and arithmetic.
    """

    geometry: GridGeometry
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.shape != (self.geometry.nrows, self.geometry.ncols):
            raise ValidationError(
                f"values shape {vals.shape} does not match geometry "
                f"{self.geometry.nrows}x{self.geometry.ncols}"
            )
        vals = np.ascontiguousarray(vals)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def nodata_mask(self) -> np.ndarray:
        return self.values == self.geometry.nodata_value

    def filled(self, fill: float = np.nan) -> np.ndarray:
        """Values with nodata cells replaced by ``fill`` (a fresh array)."""
        return np.where(self.nodata_mask, fill, self.values)

    def with_values(self, values: np.ndarray) -> "Raster":
        return Raster(self.geometry, values)

    def equals(self, other: "Raster") -> bool:
        return self.geometry == other.geometry and np.array_equal(self.values, other.values)

    def __add__(self, other: "Raster") -> "Raster":
        if not self.geometry.compatible(other.geometry):
            raise ValidationError("raster geometries are not compatible for arithmetic")
        mask = self.nodata_mask | other.nodata_mask
        out = self.values + other.values
        out = np.where(mask, self.geometry.nodata_value, out)
        return Raster(self.geometry, out)

    def __sub__(self, other: "Raster") -> "Raster":
        if not self.geometry.compatible(other.geometry):
            raise ValidationError("raster geometries are not compatible for arithmetic")
        mask = self.nodata_mask | other.nodata_mask
        out = self.values - other.values
        out = np.where(mask, self.geometry.nodata_value, out)
        return Raster(self.geometry, out)


def constant_raster(geometry: GridGeometry, value: float) -> Raster:
    return Raster(geometry, np.full((geometry.nrows, geometry.ncols), float(value)))


def read_ascii_grid(path_or_file) -> Raster:
    """Read an ASCII grid (file path or open text stream) into a :class:`Raster`.

    Header keys are case-insensitive but their order is fixed. Raises
    :class:`RasterParseError` naming the offending line on any format
    violation.
    """
    if hasattr(path_or_file, "readlines"):
        path, lines = "<stream>", path_or_file.readlines()
    else:
        path = path_or_file
        with open(path, "r") as fh:
            lines = fh.readlines()

    header = {}
    for i, key in enumerate(_HEADER_KEYS):
        if i >= len(lines):
            raise RasterParseError(path, i + 1, f"missing header line '{key}'")
        parts = lines[i].split()
        if len(parts) != 2 or parts[0].lower() != key:
            raise RasterParseError(path, i + 1, f"expected header '{key} <value>', got {lines[i]!r}")
        try:
            header[key] = float(parts[1])
        except ValueError:
            raise RasterParseError(path, i + 1, f"non-numeric header value {parts[1]!r}") from None

    for key in ("ncols", "nrows"):
        if header[key] != int(header[key]) or int(header[key]) < 1:
            raise RasterParseError(path, _HEADER_KEYS.index(key) + 1, f"{key} must be a positive integer")
    ncols, nrows = int(header["ncols"]), int(header["nrows"])
    if not header["cellsize"] > 0:
        raise RasterParseError(path, 5, "cellsize must be positive")

    rows = []
    lineno = len(_HEADER_KEYS)
    for raw in lines[len(_HEADER_KEYS):]:
        lineno += 1
        tokens = raw.split()
        if not tokens:
            continue  # tolerate blank lines
        try:
            row = np.array(tokens, dtype=np.float64)
        except ValueError:
            raise RasterParseError(path, lineno, "non-numeric raster value") from None
        if row.size != ncols:
            raise RasterParseError(path, lineno, f"expected {ncols} values, got {row.size}")
        rows.append(row)
    if len(rows) != nrows:
        raise RasterParseError(path, lineno, f"expected {nrows} data rows, got {len(rows)}")

    geometry = GridGeometry(
        ncols=ncols,
        nrows=nrows,
        x_origin=header["xllcorner"],
        y_origin=header["yllcorner"],
        cell_size=header["cellsize"],
        nodata_value=header["nodata_value"],
    )
    return Raster(geometry, np.vstack(rows))


def write_ascii_grid(raster: Raster, path_or_file, fmt: str = VALUE_FORMAT) -> None:
    """Write a raster as an ASCII grid (top row first) to a path or open stream."""
    if hasattr(path_or_file, "write"):
        _write_grid(raster, path_or_file, fmt)
    else:
        with open(path_or_file, "w") as fh:
            _write_grid(raster, fh, fmt)


def _write_grid(raster, fh, fmt):
    g = raster.geometry
    fh.write(f"ncols {g.ncols}\n")
    fh.write(f"nrows {g.nrows}\n")
    fh.write(f"xllcorner {fmt % g.x_origin}\n")
    fh.write(f"yllcorner {fmt % g.y_origin}\n")
    fh.write(f"cellsize {fmt % g.cell_size}\n")
    fh.write(f"NODATA_value {fmt % g.nodata_value}\n")
    for row in raster.values:
        fh.write(" ".join(fmt % v for v in row))
        fh.write("\n")


def resample(raster: Raster, target_cell_size: float, method: str = "block_mean") -> Raster:
    """Aggregate to a coarser grid whose cell size is an integer multiple k.

    Each output cell is the mean (or max) of its k x k source block, ignoring
    nodata cells; all-nodata blocks stay nodata. Blocks are anchored at the
    lower-left origin; when the dimensions are not divisible by k the
    leftover top rows / right columns are truncated with a warning.
    """
    if method not in ("block_mean", "block_max"):
        raise ValidationError(f"unknown resampling method {method!r}")
    ratio = target_cell_size / raster.geometry.cell_size
    k = round(ratio)
    if k < 1 or abs(ratio - k) > 1e-9:
        raise UnsupportedResolutionError(
            f"target cell size {target_cell_size} is not an integer multiple "
            f"of source cell size {raster.geometry.cell_size}"
        )
    if k == 1:
        return Raster(raster.geometry, raster.values)

    g = raster.geometry
    nrows_out, ncols_out = g.nrows // k, g.ncols // k
    if nrows_out < 1 or ncols_out < 1:
        raise UnsupportedResolutionError(f"grid {g.nrows}x{g.ncols} too small for block factor {k}")
    rem_rows, rem_cols = g.nrows % k, g.ncols % k
    vals = raster.values
    if rem_rows or rem_cols:
        warnings.warn(
            f"grid {g.nrows}x{g.ncols} not divisible by {k}: truncating "
            f"{rem_rows} top row(s) and {rem_cols} right column(s)",
            stacklevel=2,
        )
        vals = vals[rem_rows:, : g.ncols - rem_cols]

    blocks = np.where(vals == g.nodata_value, np.nan, vals)
    blocks = blocks.reshape(nrows_out, k, ncols_out, k)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN blocks
        if method == "block_mean":
            out = np.nanmean(blocks, axis=(1, 3))
        else:
            out = np.nanmax(blocks, axis=(1, 3))
    out = np.where(np.isnan(out), g.nodata_value, out)

    geometry = GridGeometry(
        ncols=ncols_out,
        nrows=nrows_out,
        x_origin=g.x_origin,
        y_origin=g.y_origin,
        cell_size=g.cell_size * k,
        nodata_value=g.nodata_value,
    )
    return Raster(geometry, out)


@dataclass(frozen=True)
class PointSet:
    """Named sample locations in map coordinates."""

    points: tuple  # of (x, y, label)

    def __post_init__(self):
        pts = tuple((float(x), float(y), str(label)) for x, y, label in self.points)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    @property
    def labels(self) -> list[str]:
        return [p[2] for p in self.points]

    def save_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("x,y,label\n")
            for x, y, label in self.points:
                fh.write(f"{x!r},{y!r},{label}\n")

    @classmethod
    def load_csv(cls, path) -> "PointSet":
        pts = []
        with open(path) as fh:
            header = fh.readline().strip().lower()
            if header.replace(" ", "") != "x,y,label":
                raise ValidationError(f"{path}: expected header 'x,y,label', got {header!r}")
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                parts = line.strip().split(",")
                if len(parts) != 3:
                    raise ValidationError(f"{path}:{lineno}: expected 'x,y,label'")
                pts.append((float(parts[0]), float(parts[1]), parts[2]))
        return cls(tuple(pts))


def sample_at_points(raster: Raster, points: PointSet) -> list[float]:
    """Value of the cell containing each point (no interpolation).

    Nodata cells yield NaN. Points outside the extent raise
    :class:`OutOfExtentError` listing every offending label.
    """
    outside = [label for x, y, label in points.points if not raster.geometry.contains(x, y)]
    if outside:
        raise OutOfExtentError(outside)
    out = []
    for x, y, label in points.points:
        row, col = raster.geometry.cell_of(x, y)
        v = raster.values[row, col]
        out.append(float("nan") if v == raster.geometry.nodata_value else float(v))
    return out
