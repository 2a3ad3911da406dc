"""Raster containers and the differential/geometric operators on them.

Arrays are stored ``values[i, j]`` with row ``i`` increasing northward (y)
and column ``j`` increasing eastward (x).  Cell ``(i, j)`` has its center at
``(x0 + (j + 0.5) * spacing, y0 + (i + 0.5) * spacing)`` where ``(x0, y0)``
is the lower-left corner of the grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from . import stencil
from .errors import DimensionError, EmptyObservationsError, ParameterError


@dataclass(frozen=True)
class GridGeometry:
    height: int
    width: int
    spacing: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise DimensionError(f"grid must be non-empty, got {self.height}x{self.width}")
        if not self.spacing > 0:
            raise ParameterError(f"spacing must be positive, got {self.spacing}")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """(xmin, xmax, ymin, ymax) of the cell edges."""
        x0, y0 = self.origin
        return (x0, x0 + self.width * self.spacing, y0, y0 + self.height * self.spacing)

    def x_centers(self) -> np.ndarray:
        return self.origin[0] + (np.arange(self.width) + 0.5) * self.spacing

    def y_centers(self) -> np.ndarray:
        return self.origin[1] + (np.arange(self.height) + 0.5) * self.spacing

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Meshgrids ``(X, Y)`` of shape ``(height, width)``."""
        return np.meshgrid(self.x_centers(), self.y_centers())

    def contains(self, x, y) -> np.ndarray:
        xmin, xmax, ymin, ymax = self.extent
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return (x >= xmin) & (x < xmax) & (y >= ymin) & (y < ymax)

    def cell_index(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        """Row and column of the cell containing each point (clipped to the grid)."""
        col = np.floor((np.asarray(x, dtype=float) - self.origin[0]) / self.spacing).astype(int)
        row = np.floor((np.asarray(y, dtype=float) - self.origin[1]) / self.spacing).astype(int)
        return np.clip(row, 0, self.height - 1), np.clip(col, 0, self.width - 1)

    def crop(self, row0: int, col0: int, height: int, width: int) -> "GridGeometry":
        x0 = self.origin[0] + col0 * self.spacing
        y0 = self.origin[1] + row0 * self.spacing
        return GridGeometry(height, width, self.spacing, (x0, y0))


@dataclass(frozen=True, eq=False)
class RasterGrid:
    """A scalar field on a uniform grid.

    ``values`` is a 2-D float array; cells equal to NaN are treated as
    missing (they are written as ``nodata`` by :func:`physbed.io.write_raster`).
    """

    values: np.ndarray
    spacing: float = 1.0
    origin: tuple[float, float] = (0.0, 0.0)
    nodata: Optional[float] = None

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2:
            raise DimensionError(f"raster values must be 2-D, got shape {v.shape}")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        # validates spacing and shape
        object.__setattr__(self, "_geometry", GridGeometry(v.shape[0], v.shape[1],
                                                            float(self.spacing), self.origin))
        object.__setattr__(self, "origin", self._geometry.origin)

    @classmethod
    def like(cls, geometry: GridGeometry, values, nodata=None) -> "RasterGrid":
        values = np.asarray(values, dtype=float)
        if values.shape != geometry.shape:
            raise DimensionError(f"values shape {values.shape} != grid {geometry.shape}")
        return cls(values, geometry.spacing, geometry.origin, nodata)

    @property
    def geometry(self) -> GridGeometry:
        return self._geometry

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.values)

    def with_values(self, values) -> "RasterGrid":
        return RasterGrid.like(self.geometry, values, self.nodata)


@dataclass(frozen=True, eq=False)
class VectorField:
    x: RasterGrid
    y: RasterGrid

    def __post_init__(self):
        if self.x.geometry != self.y.geometry:
            raise DimensionError("vector components must share shape, spacing and origin")

    @property
    def geometry(self) -> GridGeometry:
        return self.x.geometry

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.x.values, self.y.values)


def _require_stencil_size(g: GridGeometry):
    if g.height < 3 or g.width < 3:
        raise DimensionError(f"stencil operators need at least 3x3 cells, got {g.height}x{g.width}")


def gradient(f: RasterGrid) -> VectorField:
    """Spatial gradient in field units per meter.

    Central differences in the interior, first-order one-sided differences
    on the outer rows and columns.
    """
    _require_stencil_size(f.geometry)
    gx, gy = stencil.grad_xy(f.values, f.spacing)
    return VectorField(f.with_values(gx), f.with_values(gy))


def divergence(F: VectorField) -> RasterGrid:
    _require_stencil_size(F.geometry)
    return F.x.with_values(stencil.div_xy(F.x.values, F.y.values, F.x.spacing))


def laplacian(f: RasterGrid) -> RasterGrid:
    """Correlate with the 5-point kernel ``[[0,-1,0],[-1,4,-1],[0,-1,0]]``.

    This is the negative discrete Laplacian in cell units (no division by
    spacing squared): on interior cells it equals
    ``-divergence(gradient(f)) * spacing**2`` only for fields whose
    wide-stencil and compact-stencil second differences agree, e.g. quadratics.
    """
    _require_stencil_size(f.geometry)
    return f.with_values(stencil.laplace5(f.values))


def gaussian_smooth(f: RasterGrid, size: int, sigma: float) -> RasterGrid:
    if size < 1 or size % 2 == 0:
        raise ParameterError(f"kernel size must be odd and positive, got {size}")
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    return f.with_values(stencil.smooth2(f.values, int(size), float(sigma)))


def avg_pool(f: RasterGrid, k: int) -> RasterGrid:
    """Block-mean downsampling by ``k``; the result has spacing ``k * spacing``."""
    if k <= 0:
        raise ParameterError(f"pooling factor must be positive, got {k}")
    return RasterGrid(stencil.pool2(f.values, int(k)), f.spacing * k, f.origin, f.nodata)


def distance_transform(mask) -> RasterGrid:
    """Exact Euclidean distance (in pixels) from every cell to the nearest true cell."""
    if isinstance(mask, RasterGrid):
        geom, m = mask.geometry, mask.values != 0
    else:
        m = np.asarray(mask, dtype=bool)
        geom = GridGeometry(m.shape[0], m.shape[1], 1.0)
    if not m.any():
        raise EmptyObservationsError("distance transform of an all-false mask")
    d = ndimage.distance_transform_edt(~m)
    return RasterGrid.like(geom, d)


# ---------------------------------------------------------------------------
# Dihedral group D4 acting on square rasters.


@dataclass(frozen=True, order=True)
class DihedralElement:
    """``rotation`` degrees counter-clockwise, applied after an optional horizontal flip.

    The flip mirrors x (west <-> east).
    """

    rotation: int = 0
    flip: bool = False

    def __post_init__(self):
        if self.rotation not in (0, 90, 180, 270):
            raise ParameterError(f"rotation must be a multiple of 90 in [0, 270], got {self.rotation}")

    @property
    def quarter_turns(self) -> int:
        return self.rotation // 90

    def compose(self, other: "DihedralElement") -> "DihedralElement":
        """The element equivalent to applying ``other`` first, then ``self``."""
        # R^a F^f R^b F^g = R^(a + (-1)^f b) F^(f xor g)
        b = -other.quarter_turns if self.flip else other.quarter_turns
        turns = (self.quarter_turns + b) % 4
        return DihedralElement(90 * turns, self.flip != other.flip)

    def inverse(self) -> "DihedralElement":
        if self.flip:
            return self
        return DihedralElement((360 - self.rotation) % 360, False)

    @staticmethod
    def elements() -> list["DihedralElement"]:
        """The 8 elements, identity first."""
        return [DihedralElement(r, f) for f in (False, True) for r in (0, 90, 180, 270)]


IDENTITY = DihedralElement()


def _rot_ccw(a: np.ndarray, turns: int) -> np.ndarray:
    # rows point north, so a CCW turn in (x, y) is a clockwise turn of the array as printed
    return np.ascontiguousarray(np.rot90(a, -turns))


def transform_scalar(a: np.ndarray, g: DihedralElement) -> np.ndarray:
    if g.quarter_turns % 2 and a.shape[0] != a.shape[1]:
        raise DimensionError(f"quarter-turn rotation needs a square grid, got {a.shape}")
    out = a[:, ::-1] if g.flip else a
    return _rot_ccw(out, g.quarter_turns)


def transform_vector(vx: np.ndarray, vy: np.ndarray, g: DihedralElement):
    """Spatially permute both components and rotate/reflect the vectors themselves."""
    if g.flip:
        vx, vy = -vx[:, ::-1], vy[:, ::-1]
    for _ in range(g.quarter_turns):
        vx, vy = -vy, vx
    rot = DihedralElement(g.rotation)
    return transform_scalar(vx, rot), transform_scalar(vy, rot)


def dihedral_apply(stack: Sequence[RasterGrid], vector_channels: Iterable[tuple[int, int]],
                   g: DihedralElement) -> list[RasterGrid]:
    """Apply ``g`` to a stack of rasters, treating ``vector_channels`` pairs as (x, y) vectors."""
    out = list(stack)
    paired = set()
    for ix, iy in vector_channels:
        vx, vy = transform_vector(stack[ix].values, stack[iy].values, g)
        out[ix] = stack[ix].with_values(vx)
        out[iy] = stack[iy].with_values(vy)
        paired.update((ix, iy))
    for i, grid in enumerate(stack):
        if i not in paired:
            out[i] = grid.with_values(transform_scalar(grid.values, g))
    return out


def fourier_coords(height: int, width: int, bands: int = 3, spacing: float = 1.0,
                   origin=(0.0, 0.0)) -> list[RasterGrid]:
    """Sinusoidal coordinate encodings on axes normalized to [-1, 1].

    Channel order: for each band l, ``sin(2^l pi x), cos(2^l pi x),
    sin(2^l pi y), cos(2^l pi y)``.
    """
    if bands < 1:
        raise ParameterError(f"need at least one band, got {bands}")
    xt = np.linspace(-1.0, 1.0, width) if width > 1 else np.zeros(1)
    yt = np.linspace(-1.0, 1.0, height) if height > 1 else np.zeros(1)
    X, Y = np.meshgrid(xt, yt)
    geom = GridGeometry(height, width, spacing, origin)
    chans = []
    for band in range(bands):
        w = (2.0 ** band) * np.pi
        for a in (X, Y):
            chans.append(RasterGrid.like(geom, np.sin(w * a)))
            chans.append(RasterGrid.like(geom, np.cos(w * a)))
    return chans
