"""ESRI ASCII Grid rasters and ``x,y,bed`` pick tables."""

from __future__ import annotations

import csv
import os
from typing import Optional

import numpy as np

from .data import RadarPicks
from .errors import ParseError
from .grid import GridGeometry, RasterGrid

DEFAULT_NODATA = -9999.0
_REQUIRED = ("ncols", "nrows", "cellsize")


def read_raster(path) -> RasterGrid:
    """Read an ESRI ASCII Grid.

    The first data row is the northernmost.  Cells equal to ``NODATA_value``
    become NaN; the sentinel is kept on the returned grid.  ``xllcenter`` /
    ``yllcenter`` headers are accepted and converted to corner coordinates.
    """
    path = os.fspath(path)
    header = {}
    with open(path, "r") as fh:
        lines = fh.readlines()
    lineno = 0
    while lineno < len(lines):
        parts = lines[lineno].split()
        if not parts:
            lineno += 1
            continue
        key = parts[0].lower()
        if key[0].isalpha():
            if len(parts) != 2:
                raise ParseError(f"malformed header line {lines[lineno].strip()!r}", path, lineno + 1)
            try:
                header[key] = float(parts[1])
            except ValueError:
                raise ParseError(f"non-numeric header value for '{parts[0]}'", path, lineno + 1)
            lineno += 1
        else:
            break
    for key in _REQUIRED:
        if key not in header:
            raise ParseError(f"missing header key '{key}'", path)
    ncols, nrows = int(header["ncols"]), int(header["nrows"])
    if ncols != header["ncols"] or nrows != header["nrows"] or ncols < 1 or nrows < 1:
        raise ParseError("ncols/nrows must be positive integers", path)
    cellsize = header["cellsize"]
    if cellsize <= 0:
        raise ParseError("cellsize must be positive", path)
    if "xllcorner" in header:
        x0 = header["xllcorner"]
    elif "xllcenter" in header:
        x0 = header["xllcenter"] - 0.5 * cellsize
    else:
        raise ParseError("missing header key 'xllcorner'", path)
    if "yllcorner" in header:
        y0 = header["yllcorner"]
    elif "yllcenter" in header:
        y0 = header["yllcenter"] - 0.5 * cellsize
    else:
        raise ParseError("missing header key 'yllcorner'", path)
    nodata = header.get("nodata_value")

    rows = []
    for i in range(lineno, len(lines)):
        parts = lines[i].split()
        if not parts:
            continue
        if len(parts) != ncols:
            raise ParseError(f"expected {ncols} values, found {len(parts)}", path, i + 1)
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise ParseError("non-numeric cell value", path, i + 1)
    if len(rows) != nrows:
        raise ParseError(f"expected {nrows} data rows, found {len(rows)}", path)
    values = np.array(rows[::-1], dtype=float)
    if nodata is not None:
        values[values == nodata] = np.nan
    return RasterGrid(values, cellsize, (x0, y0), nodata)


def write_raster(path, grid: RasterGrid, nodata: Optional[float] = None):
    """Write ``grid`` with 9 significant digits; NaN cells become the nodata sentinel."""
    if nodata is None:
        nodata = grid.nodata if grid.nodata is not None else DEFAULT_NODATA
    x0, y0 = grid.origin
    out = np.where(np.isfinite(grid.values), grid.values, nodata)
    with open(os.fspath(path), "w") as fh:
        fh.write(f"ncols {grid.width}\n")
        fh.write(f"nrows {grid.height}\n")
        fh.write(f"xllcorner {x0:.9g}\n")
        fh.write(f"yllcorner {y0:.9g}\n")
        fh.write(f"cellsize {grid.spacing:.9g}\n")
        fh.write(f"NODATA_value {nodata:.9g}\n")
        for row in out[::-1]:
            fh.write(" ".join(f"{v:.9g}" for v in row))
            fh.write("\n")


def read_picks(path, geometry: Optional[GridGeometry] = None) -> RadarPicks:
    """Read a ``x,y,bed`` CSV.  With ``geometry``, out-of-extent picks are dropped and counted."""
    path = os.fspath(path)
    xs, ys, bs = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            head = next(reader)
        except StopIteration:
            raise ParseError("empty picks file", path, 1)
        cols = [h.strip().lower() for h in head]
        try:
            ix, iy, ib = cols.index("x"), cols.index("y"), cols.index("bed")
        except ValueError:
            raise ParseError("header must contain columns x,y,bed", path, 1)
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            try:
                xs.append(float(row[ix]))
                ys.append(float(row[iy]))
                bs.append(float(row[ib]))
            except (ValueError, IndexError):
                raise ParseError(f"bad pick record {row!r}", path, reader.line_num)
    picks = RadarPicks(xs, ys, bs)
    if geometry is not None:
        picks = picks.within(geometry)
    return picks


def write_picks(path, picks: RadarPicks):
    with open(os.fspath(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "bed"])
        for x, y, b in zip(picks.x, picks.y, picks.bed):
            w.writerow([f"{x:.9g}", f"{y:.9g}", f"{b:.9g}"])
