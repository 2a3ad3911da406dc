"""Spatial hold-out splits and error metrics restricted to held-out cores."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .data import RadarPicks
from .errors import DimensionError, InsufficientDataError, ParameterError
from .grid import IDENTITY, DihedralElement, GridGeometry, RasterGrid, transform_scalar
from .solve import Tile, TileConfig, tile_layout

log = logging.getLogger(__name__)

STRATA = ((0.0, 2.0, "[0,2]"), (2.0, 6.0, "(2,6]"), (6.0, math.inf, "(6,inf)"))


def _values(a) -> np.ndarray:
    return a.values if isinstance(a, RasterGrid) else np.asarray(a, dtype=float)


def _cells(core) -> np.ndarray:
    if isinstance(core, CoreMask):
        return core.mask
    if isinstance(core, RasterGrid):
        return core.values != 0
    return np.asarray(core, dtype=bool)


# ---------------------------------------------------------------------------
# Splits


@dataclass(frozen=True)
class SplitSpec:
    """Two-block split at the median coordinate.

    ``vertical`` puts the train block west and the test block east;
    ``horizontal`` puts train south and test north.  Each block is eroded by
    ``buffer`` pixels from the split line, and also from the outer grid
    edges when ``erode_all`` is set.
    """

    axis: str = "vertical"
    buffer: int = 96
    erode_all: bool = False

    def __post_init__(self):
        if self.axis not in ("vertical", "horizontal"):
            raise ParameterError(f"axis must be 'vertical' or 'horizontal', got {self.axis!r}")
        if self.buffer < 0:
            raise ParameterError("buffer must be non-negative")


@dataclass(frozen=True, eq=False)
class CoreMask:
    mask: np.ndarray
    role: str
    geometry: GridGeometry

    def __post_init__(self):
        m = np.array(self.mask, dtype=bool)
        if m.shape != self.geometry.shape:
            raise DimensionError("core mask does not match its geometry")
        m.flags.writeable = False
        object.__setattr__(self, "mask", m)

    @property
    def count(self) -> int:
        return int(self.mask.sum())

    def as_raster(self) -> RasterGrid:
        return RasterGrid.like(self.geometry, self.mask.astype(float))


def block_split(geometry: GridGeometry, axis: str = "vertical", buffer: int = 96,
                erode_all: bool = False) -> tuple[CoreMask, CoreMask]:
    """Train and test cores of a median split, each at least ``buffer`` px from the line.

    Distances are measured from cell centers in pixels.  With an odd cell
    count the middle cell sits on the line and belongs to neither block.
    """
    spec = SplitSpec(axis, buffer, erode_all)
    n = geometry.width if spec.axis == "vertical" else geometry.height
    if not 2 * spec.buffer < n:
        raise ParameterError(f"2 * buffer ({2 * spec.buffer}) must be smaller than the extent {n}")
    c = np.arange(n) + 0.5
    line = n / 2.0
    train1 = (c < line) & (line - c >= spec.buffer)
    test1 = (c > line) & (c - line >= spec.buffer)
    if spec.erode_all:
        edge = (c >= spec.buffer) & (n - c >= spec.buffer)
        train1 &= edge
        test1 &= edge
    if spec.axis == "vertical":
        other = geometry.height
        train = np.broadcast_to(train1[None, :], geometry.shape)
        test = np.broadcast_to(test1[None, :], geometry.shape)
    else:
        other = geometry.width
        train = np.broadcast_to(train1[:, None], geometry.shape)
        test = np.broadcast_to(test1[:, None], geometry.shape)
    if spec.erode_all:
        co = np.arange(other) + 0.5
        keep = (co >= spec.buffer) & (other - co >= spec.buffer)
        keep2 = keep[:, None] if spec.axis == "vertical" else keep[None, :]
        train, test = train & keep2, test & keep2
    if not train.any() or not test.any():
        raise ParameterError("split leaves an empty core")
    return CoreMask(train, "train", geometry), CoreMask(test, "test", geometry)


def _tile_core(tile, config: TileConfig):
    if isinstance(tile, Tile):
        return tile.core_extent
    r0, c0 = tile
    b = config.border
    return (r0 + b, c0 + b, config.patch - 2 * b, config.patch - 2 * b)


def train_tiles(train_core, config: TileConfig = TileConfig()) -> list[tuple[int, int]]:
    """Origins of all stride-aligned patches whose inset core lies inside the train core."""
    m = _cells(train_core)
    H, W = m.shape
    out = []
    for r0 in range(0, H - config.patch + 1, config.stride):
        for c0 in range(0, W - config.patch + 1, config.stride):
            r, c, h, w = _tile_core((r0, c0), config)
            if m[r:r + h, c:c + w].all():
                out.append((r0, c0))
    return out


@dataclass
class LeakageReport:
    n_tiles: int
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations


def check_tile_leakage(tiles: Sequence, config: TileConfig, train_core) -> LeakageReport:
    """List the tiles whose core is not entirely inside the train core.

    ``tiles`` holds :class:`~physbed.solve.Tile` objects or ``(row0, col0)``
    origins (core inset by ``border`` on every side).  Core cells falling
    off the grid count as violations.
    """
    m = _cells(train_core)
    H, W = m.shape
    bad = []
    for t in tiles:
        r, c, h, w = _tile_core(t, config)
        if r < 0 or c < 0 or r + h > H or c + w > W or not m[r:r + h, c:c + w].all():
            bad.append(t)
    return LeakageReport(len(tiles), bad)


# ---------------------------------------------------------------------------
# Pixel metrics


@dataclass(frozen=True)
class PixelMetrics:
    mae: float
    rmse: float
    r2: float
    n: int
    r2_defined: bool = True

    @property
    def empty(self) -> bool:
        return self.n == 0


def _error_stats(pred: np.ndarray, ref: np.ndarray) -> PixelMetrics:
    n = pred.size
    if n == 0:
        return PixelMetrics(math.nan, math.nan, math.nan, 0, False)
    err = pred - ref
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err * err)))
    ss_tot = float(np.sum((ref - ref.mean()) ** 2))
    if ss_tot == 0:
        return PixelMetrics(mae, rmse, math.nan, n, False)
    return PixelMetrics(mae, rmse, 1.0 - float(np.sum(err * err)) / ss_tot, n, True)


def pixel_metrics(pred, ref, core) -> PixelMetrics:
    """MAE, RMSE and R^2 over core cells.  R^2 is NaN and flagged when the reference is constant."""
    p, r, m = _values(pred), _values(ref), _cells(core)
    if p.shape != r.shape or p.shape != m.shape:
        raise DimensionError("prediction, reference and core must share a shape")
    if not m.any():
        raise InsufficientDataError("empty core")
    return _error_stats(p[m], r[m])


def _rmse(p, r, m) -> float:
    e = p[m] - r[m]
    return float(np.sqrt(np.mean(e * e)))


def align_orientation(pred, ref, core):
    """The dihedral transform of ``pred`` with the lowest core RMSE against ``ref``.

    Identity is tried first and only strictly better elements replace it.
    Quarter turns are skipped on non-square grids.
    """
    p, r, m = _values(pred), _values(ref), _cells(core)
    best_g, best_p = IDENTITY, p
    best = _rmse(p, r, m)
    for g in DihedralElement.elements()[1:]:
        if g.quarter_turns % 2 and p.shape[0] != p.shape[1]:
            continue
        q = transform_scalar(p, g)
        e = _rmse(q, r, m)
        if e < best:
            best_g, best_p, best = g, q, e
    out = pred.with_values(best_p) if isinstance(pred, RasterGrid) else best_p
    return best_g, out


def ssim(pred, ref, core, window: int = 7, sigma: float = 1.5, k1: float = 0.01,
         k2: float = 0.03, dynamic_range: Optional[float] = None) -> float:
    """Mean local SSIM over Gaussian windows lying entirely inside the core, clamped to [0, 1]."""
    p, r, m = _values(pred), _values(ref), _cells(core)
    if dynamic_range is None:
        dynamic_range = float(np.ptp(r[m])) if m.any() else 0.0
    half = window // 2
    inner = ndimage.binary_erosion(m, structure=np.ones((window, window), bool), border_value=0)
    if not inner.any():
        raise InsufficientDataError(f"core holds no full {window}x{window} window")
    if dynamic_range <= 0:
        warnings.warn("reference has zero dynamic range over the core; SSIM undefined")
        return math.nan
    t = np.arange(-half, half + 1, dtype=float)
    g = np.exp(-0.5 * (t / sigma) ** 2)
    g /= g.sum()

    def filt(a):
        return ndimage.correlate1d(ndimage.correlate1d(a, g, axis=0, mode="reflect"), g, axis=1,
                                   mode="reflect")

    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    mx, my = filt(p), filt(r)
    sxx = filt(p * p) - mx * mx
    syy = filt(r * r) - my * my
    sxy = filt(p * r) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    val = float(np.mean(num[inner] / den[inner]))
    return min(1.0, max(0.0, val))


def psnr(pred, ref, core) -> float:
    """``10 log10(R^2 / MSE)`` with R the reference range over the core; +inf when MSE is 0."""
    p, r, m = _values(pred), _values(ref), _cells(core)
    if not m.any():
        raise InsufficientDataError("empty core")
    R = float(np.ptp(r[m]))
    e = p[m] - r[m]
    mse = float(np.mean(e * e))
    if mse == 0:
        return math.inf
    if R == 0:
        warnings.warn("reference has zero dynamic range over the core; PSNR undefined")
        return math.nan
    return 10.0 * math.log10(R * R / mse)


def tri(field) -> RasterGrid:
    """Terrain ruggedness: root-sum-square difference to the 8 neighbors; NaN on the border."""
    z = _values(field)
    out = np.full(z.shape, np.nan)
    if z.shape[0] >= 3 and z.shape[1] >= 3:
        c = z[1:-1, 1:-1]
        acc = np.zeros_like(c)
        H, W = z.shape
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                if di == 0 and dj == 0:
                    continue
                nb = z[1 + di:H - 1 + di, 1 + dj:W - 1 + dj]
                acc += (nb - c) ** 2
        out[1:-1, 1:-1] = np.sqrt(acc)
    if isinstance(field, RasterGrid):
        return field.with_values(out)
    return RasterGrid(out)


def tri_diff(pred, ref, core) -> float:
    """Mean ``|TRI(pred) - TRI(ref)|`` over interior core cells."""
    m = _cells(core).copy()
    m[0, :] = m[-1, :] = False
    m[:, 0] = m[:, -1] = False
    if not m.any():
        raise InsufficientDataError("no interior core cells for TRI")
    a, b = tri(pred).values, tri(ref).values
    return float(np.mean(np.abs(a[m] - b[m])))


@dataclass(frozen=True)
class RadarErrors:
    metrics: PixelMetrics
    n_excluded: int

    @property
    def empty(self) -> bool:
        return self.metrics.empty


def radar_errors(bed, picks: RadarPicks, core) -> RadarErrors:
    """Errors of ``bed`` sampled at the containing cell of each pick in the core.

    Picks outside the core (or the grid) are excluded and counted; with none
    left the result is flagged empty.
    """
    geom = bed.geometry
    m = _cells(core)
    inside = geom.contains(picks.x, picks.y)
    row, col = geom.cell_index(picks.x, picks.y)
    sel = inside & m[row, col]
    vals = bed.values[row[sel], col[sel]]
    stats = _error_stats(vals, picks.bed[sel])
    if stats.empty:
        log.warning("no radar picks inside the core")
    return RadarErrors(stats, int((~sel).sum()))


@dataclass(frozen=True)
class StratumResult:
    label: str
    lo: float
    hi: float
    rmse: float
    count: int
    sse: float


def stratified_rmse(pred, ref, core, d_rad) -> list[StratumResult]:
    """RMSE in distance-to-pick bins ``[0,2]``, ``(2,6]`` and ``(6,inf)`` px over core cells.

    An empty bin is reported with NaN RMSE and zero count.
    """
    p, r, m, d = _values(pred), _values(ref), _cells(core), _values(d_rad)
    out = []
    for lo, hi, label in STRATA:
        inbin = (d <= hi) if lo == 0 else (d > lo) & (d <= hi)
        sel = m & inbin
        n = int(sel.sum())
        e = p[sel] - r[sel]
        sse = float(np.sum(e * e))
        out.append(StratumResult(label, lo, hi, math.sqrt(sse / n) if n else math.nan, n, sse))
    return out


# ---------------------------------------------------------------------------
# Report


def _jsonable(x):
    if isinstance(x, float) and not math.isfinite(x):
        return "inf" if x > 0 else ("-inf" if x < 0 else "nan")
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


@dataclass
class MetricsReport:
    orientation: DihedralElement
    reference: PixelMetrics
    ssim: float
    psnr: float
    tri_diff: float
    radar: Optional[RadarErrors]
    strata: list
    n_core: int

    def to_dict(self) -> dict:
        d = {
            "orientation": {"rotation": self.orientation.rotation, "flip": self.orientation.flip},
            "n_core": self.n_core,
            "mae": self.reference.mae,
            "rmse": self.reference.rmse,
            "r2": self.reference.r2,
            "r2_defined": self.reference.r2_defined,
            "ssim": self.ssim,
            "psnr": self.psnr,
            "tri_diff": self.tri_diff,
            "strata": [asdict(s) for s in self.strata],
        }
        if self.radar is not None:
            rm = self.radar.metrics
            d.update({"radar_mae": rm.mae, "radar_rmse": rm.rmse, "radar_r2": rm.r2,
                      "radar_n": rm.n, "radar_excluded": self.radar.n_excluded,
                      "radar_empty": self.radar.empty})
        return d

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True)

    def to_text(self) -> str:
        d = self.to_dict()
        rows = [("orientation", f"rot {self.orientation.rotation} flip {self.orientation.flip}"),
                ("core cells", str(self.n_core))]
        for key in ("mae", "rmse", "r2", "ssim", "psnr", "tri_diff", "radar_mae", "radar_rmse",
                    "radar_r2", "radar_n"):
            if key in d:
                v = d[key]
                rows.append((key, f"{v:.6g}" if isinstance(v, float) else str(v)))
        for s in self.strata:
            rows.append((f"rmse d{s.label}", f"{s.rmse:.6g} (n={s.count})"))
        w = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(w)}  {v}" for k, v in rows) + "\n"


def evaluate(pred: RasterGrid, ref: RasterGrid, core, picks: Optional[RadarPicks] = None,
             d_rad=None, align: bool = True) -> MetricsReport:
    """Full report on ``core``: orientation is aligned once, then every metric uses the aligned map."""
    if pred.geometry != ref.geometry:
        raise DimensionError("prediction and reference grids differ")
    m = _cells(core)
    g, aligned = align_orientation(pred, ref, m) if align else (IDENTITY, pred)
    base = pixel_metrics(aligned, ref, m)
    s = ssim(aligned, ref, m)
    ps = psnr(aligned, ref, m)
    td = tri_diff(aligned, ref, m)
    radar = radar_errors(aligned, picks, m) if picks is not None else None
    if d_rad is None:
        d_rad = np.full(m.shape, math.inf)
    strata = stratified_rmse(aligned, ref, m, d_rad)
    return MetricsReport(g, base, s, ps, td, radar, strata, int(m.sum()))
