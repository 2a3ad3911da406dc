"""Scenes, radar picks, observation layers and normalization statistics."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from . import stencil
from .errors import DimensionError, EmptyObservationsError, ParameterError
from .grid import (GridGeometry, RasterGrid, VectorField, distance_transform, fourier_coords,
                   gradient)

log = logging.getLogger(__name__)

MAD_TO_SIGMA = 1.4826


@dataclass(frozen=True, eq=False)
class Scene:
    """Geophysical inputs on one grid.

    Prior thickness ``h_p = s - b_p`` is always derived, never stored, so it
    cannot drift out of sync with the surface and the prior bed.
    """

    s: RasterGrid
    v: VectorField
    smb: RasterGrid
    dhdt: RasterGrid
    b_p: RasterGrid
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        geom = self.s.geometry
        for name in ("smb", "dhdt", "b_p"):
            if getattr(self, name).geometry != geom:
                raise DimensionError(f"scene field '{name}' does not share the surface geometry")
        if self.v.geometry != geom:
            raise DimensionError("scene velocity does not share the surface geometry")
        valid = self.valid
        if valid is None:
            valid = np.ones(geom.shape, dtype=bool)
        valid = np.array(valid, dtype=bool)
        if valid.shape != geom.shape:
            raise DimensionError("valid mask shape mismatch")
        valid.flags.writeable = False
        object.__setattr__(self, "valid", valid)

    @property
    def geometry(self) -> GridGeometry:
        return self.s.geometry

    @property
    def h_p(self) -> RasterGrid:
        return self.s.with_values(self.s.values - self.b_p.values)

    @property
    def vx(self) -> np.ndarray:
        return self.v.x.values

    @property
    def vy(self) -> np.ndarray:
        return self.v.y.values

    def crop(self, row0: int, col0: int, height: int, width: int) -> "Scene":
        geom = self.geometry.crop(row0, col0, height, width)
        sl = (slice(row0, row0 + height), slice(col0, col0 + width))

        def cut(g: RasterGrid) -> RasterGrid:
            return RasterGrid.like(geom, g.values[sl], g.nodata)

        return Scene(cut(self.s), VectorField(cut(self.v.x), cut(self.v.y)), cut(self.smb),
                     cut(self.dhdt), cut(self.b_p), self.valid[sl])

    def replace(self, **arrays) -> "Scene":
        """New scene with some fields' values swapped (same geometry).

        Keys: ``s, vx, vy, smb, dhdt, b_p, valid``.
        """
        geom = self.geometry

        def pick(name, current):
            return RasterGrid.like(geom, arrays[name]) if name in arrays else current

        v = VectorField(pick("vx", self.v.x), pick("vy", self.v.y))
        return Scene(pick("s", self.s), v, pick("smb", self.smb), pick("dhdt", self.dhdt),
                     pick("b_p", self.b_p), arrays.get("valid", self.valid))


@dataclass(frozen=True, eq=False)
class RadarPicks:
    """Geolocated bed picks ``(x, y, bed)`` in meters."""

    x: np.ndarray
    y: np.ndarray
    bed: np.ndarray
    n_dropped: int = 0

    def __post_init__(self):
        arrs = [np.array(a, dtype=float).ravel() for a in (self.x, self.y, self.bed)]
        if not (len(arrs[0]) == len(arrs[1]) == len(arrs[2])):
            raise DimensionError("pick coordinate and value arrays differ in length")
        for name, a in zip(("x", "y", "bed"), arrs):
            a.flags.writeable = False
            object.__setattr__(self, name, a)

    @property
    def count(self) -> int:
        return len(self.x)

    def __len__(self):
        return self.count

    def subset(self, keep) -> "RadarPicks":
        keep = np.asarray(keep)
        return RadarPicks(self.x[keep], self.y[keep], self.bed[keep], self.n_dropped)

    def within(self, geometry: GridGeometry) -> "RadarPicks":
        """Drop picks outside the grid extent; the count is added to ``n_dropped``."""
        inside = geometry.contains(self.x, self.y)
        dropped = int((~inside).sum())
        if dropped:
            log.warning("dropped %d radar pick(s) outside the grid extent", dropped)
        out = self.subset(inside)
        return RadarPicks(out.x, out.y, out.bed, self.n_dropped + dropped)

    def in_mask(self, geometry: GridGeometry, mask: np.ndarray) -> "RadarPicks":
        """Picks whose containing cell is true in ``mask``."""
        inside = geometry.contains(self.x, self.y)
        rows, cols = geometry.cell_index(self.x, self.y)
        return self.subset(inside & np.asarray(mask, dtype=bool)[rows, cols])

    def canonical(self) -> "RadarPicks":
        """Picks sorted by (x, y, bed) so downstream sums do not depend on input order."""
        order = np.lexsort((self.bed, self.y, self.x))
        return self.subset(order)


@dataclass(frozen=True, eq=False)
class ObservationLayer:
    """Radar picks rasterized onto the scene grid.

    ``h_rad`` is NaN off the mask.  ``d_rad`` is in pixels and ``confidence``
    is ``exp(-d_rad / tau)``.  A layer with no picks has an all-false mask,
    infinite distance and zero confidence.
    """

    mask: np.ndarray
    h_rad: np.ndarray
    d_rad: np.ndarray
    confidence: np.ndarray
    tau: float = 12.0

    @property
    def empty(self) -> bool:
        return not self.mask.any()

    def crop(self, row0: int, col0: int, height: int, width: int) -> "ObservationLayer":
        """Local layer for a sub-window; distances are recomputed inside the window."""
        sl = (slice(row0, row0 + height), slice(col0, col0 + width))
        return observations_from_mask(self.mask[sl], self.h_rad[sl], self.tau)


@dataclass(frozen=True)
class NormStats:
    mu_t: float
    sigma_t: float

    def __post_init__(self):
        if not self.sigma_t > 0:
            raise ParameterError(f"sigma_t must be positive, got {self.sigma_t}")


@dataclass(frozen=True)
class ObservationConfig:
    """Splatting and confidence settings.  ``radius_px`` is multiplied by the grid spacing."""

    k: int = 9
    radius_px: float = 2.5
    tau: float = 12.0
    sigma_floor: float = 1.0

    def __post_init__(self):
        if self.k < 1:
            raise ParameterError("splat neighbor count must be >= 1")
        if not self.radius_px > 0 or not self.tau > 0 or not self.sigma_floor > 0:
            raise ParameterError("radius_px, tau and sigma_floor must be positive")


def splat_picks(picks: RadarPicks, geometry: GridGeometry, k: int = 9,
                radius_px: float = 2.5) -> tuple[RasterGrid, np.ndarray]:
    """Distribute pick values onto the ``k`` nearest cell centers.

    Each pick contributes to its neighbors with weight ``exp(-(d / r)**2)``
    with ``r = radius_px * spacing``; a cell's value is the weighted mean of
    everything it received.  Returns ``(bed, mask)`` where ``bed`` is NaN
    outside ``mask``.
    """
    if picks.count == 0:
        raise EmptyObservationsError("no radar picks to splat")
    if k < 1 or not radius_px > 0:
        raise ParameterError("k must be >= 1 and radius_px > 0")
    picks = picks.canonical()
    X, Y = geometry.cell_centers()
    tree = cKDTree(np.column_stack([X.ravel(), Y.ravel()]))
    kk = min(k, X.size)
    d, idx = tree.query(np.column_stack([picks.x, picks.y]), k=kk)
    d = d.reshape(picks.count, kk)
    idx = idx.reshape(picks.count, kk)
    r = radius_px * geometry.spacing
    w = np.exp(-(d / r) ** 2)
    wsum = np.zeros(X.size)
    vsum = np.zeros(X.size)
    np.add.at(wsum, idx.ravel(), w.ravel())
    np.add.at(vsum, idx.ravel(), (w * picks.bed[:, None]).ravel())
    mask = wsum > 0
    bed = np.full(X.size, np.nan)
    bed[mask] = vsum[mask] / wsum[mask]
    return RasterGrid.like(geometry, bed.reshape(geometry.shape)), mask.reshape(geometry.shape)


def confidence_map(d_rad, tau: float = 12.0):
    """``exp(-d / tau)``; accepts an array or a RasterGrid and returns the same kind."""
    if not tau > 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    if isinstance(d_rad, RasterGrid):
        return d_rad.with_values(np.exp(-d_rad.values / tau))
    return np.exp(-np.asarray(d_rad, dtype=float) / tau)


def observations_from_mask(mask: np.ndarray, h_rad: np.ndarray, tau: float) -> ObservationLayer:
    mask = np.asarray(mask, dtype=bool)
    h = np.where(mask, h_rad, np.nan)
    if mask.any():
        d = distance_transform(mask).values
    else:
        d = np.full(mask.shape, np.inf)
    return ObservationLayer(mask, h, d, confidence_map(d, tau), tau)


def build_observations(picks: RadarPicks, scene: Scene,
                       config: ObservationConfig = ObservationConfig()) -> ObservationLayer:
    """Splat picks, convert to thickness against the surface and derive distance/confidence."""
    if picks.count == 0:
        return observations_from_mask(np.zeros(scene.geometry.shape, bool),
                                      np.full(scene.geometry.shape, np.nan), config.tau)
    bed, mask = splat_picks(picks, scene.geometry, config.k, config.radius_px)
    return observations_from_mask(mask, scene.s.values - bed.values, config.tau)


def robust_stats(residuals, floor: float = 1.0) -> NormStats:
    """Median and 1.4826 * MAD, with the scale floored at ``floor``."""
    r = np.asarray(residuals, dtype=float).ravel()
    r = r[np.isfinite(r)]
    if r.size == 0:
        raise EmptyObservationsError("no residuals to normalize")
    mu = float(np.median(r))
    sigma = MAD_TO_SIGMA * float(np.median(np.abs(r - mu)))
    return NormStats(mu, max(floor, sigma))


def residual_norm_stats(obs: ObservationLayer, scene: Scene, region: np.ndarray,
                        floor: float = 1.0) -> NormStats:
    """Robust stats of ``h_rad - h_p`` over observed cells inside ``region``."""
    sel = obs.mask & np.asarray(region, dtype=bool) & scene.valid
    if not sel.any():
        raise EmptyObservationsError("no observed cells inside the training region")
    return robust_stats(obs.h_rad[sel] - scene.h_p.values[sel], floor)


# ---------------------------------------------------------------------------
# Feature stack


FEATURE_NAMES = ("s", "vx", "vy", "smb", "dhdt", "ds_dx", "ds_dy", "h_p")


@dataclass(frozen=True, eq=False)
class FeatureStack:
    channels: list
    names: list
    vector_pairs: list
    mean: np.ndarray
    std: np.ndarray


def build_feature_stack(scene: Scene, train_mask=None, bands: int = 3) -> FeatureStack:
    """Standardized input channels for the residual predictor.

    Scalar channels are shifted and scaled with their mean/std over valid
    training cells.  Each vector pair is divided by the RMS of its magnitude
    (no shift) so rotations of the stack stay rotations of the vectors.
    Fourier coordinate channels are appended unscaled.
    """
    geom = scene.geometry
    sel = scene.valid.copy()
    if train_mask is not None:
        sel &= np.asarray(train_mask, dtype=bool)
    if not sel.any():
        raise EmptyObservationsError("no valid training cells for feature statistics")
    gs = gradient(scene.s)
    raw = [scene.s.values, scene.vx, scene.vy, scene.smb.values, scene.dhdt.values,
           gs.x.values, gs.y.values, scene.h_p.values]
    pairs = [(1, 2), (5, 6)]
    in_pair = {i for p in pairs for i in p}
    mean = np.zeros(len(raw))
    std = np.ones(len(raw))
    for i, a in enumerate(raw):
        if i in in_pair:
            continue
        mean[i] = a[sel].mean()
        sd = a[sel].std()
        if sd == 0 or not np.isfinite(sd):
            warnings.warn(f"channel '{FEATURE_NAMES[i]}' has zero spread; using std=1")
            sd = 1.0
        std[i] = sd
    for ix, iy in pairs:
        rms = math.sqrt(float(np.mean(raw[ix][sel] ** 2 + raw[iy][sel] ** 2)))
        if rms == 0:
            warnings.warn(f"vector pair '{FEATURE_NAMES[ix]}/{FEATURE_NAMES[iy]}' is zero; using scale 1")
            rms = 1.0
        std[ix] = std[iy] = rms
    chans = [RasterGrid.like(geom, (a - mean[i]) / std[i]) for i, a in enumerate(raw)]
    names = list(FEATURE_NAMES)
    four = fourier_coords(geom.height, geom.width, bands, geom.spacing, geom.origin)
    for band in range(bands):
        for ax in ("x", "y"):
            names += [f"sin{band}_{ax}", f"cos{band}_{ax}"]
    return FeatureStack(chans + four, names, pairs, mean, std)


# ---------------------------------------------------------------------------
# Synthetic scenes


@dataclass(frozen=True)
class SynthParams:
    """Knobs for :func:`synth_scene`.

    The surface falls along +x only and the ice flux is directed along +x
    with a cross-flow profile ``q(y)``, so ``h * v`` has zero discrete
    divergence at every pooling scale and smoothing width.  ``dhdt`` is then
    set from the scene's own divergence stencil.
    """

    n_troughs: int = 6
    trough_depth: float = 300.0
    trough_width_px: float = 12.0
    trough_length_px: float = 80.0
    bed_top: float = 200.0
    bed_drop: float = 400.0
    surface_top: float = 1800.0
    surface_drop: float = 900.0
    speed: float = 500.0
    shear_margin: float = 0.6
    smb_mean: float = -0.5
    smb_lapse: float = 1.5e-3
    bias_amplitude: float = 30.0
    bias_length_px: float = 120.0
    bias_offset: float = 0.0
    pick_pattern: str = "lines"
    n_lines: int = 8
    pick_step_px: float = 1.0
    lattice_step: int = 4
    pick_noise: float = 0.0
    h_min: float = 50.0

    def __post_init__(self):
        if self.pick_pattern not in ("lines", "lattice", "none"):
            raise ParameterError(f"unknown pick pattern '{self.pick_pattern}'")
        if self.h_min <= 0:
            raise ParameterError("h_min must be positive")


@dataclass(frozen=True, eq=False)
class SyntheticCase:
    scene: Scene
    truth_bed: RasterGrid
    picks: RadarPicks
    bias: RasterGrid

    @property
    def true_residual(self) -> np.ndarray:
        """``h* - h_p``, the residual field a perfect reconstruction recovers."""
        return (self.scene.s.values - self.truth_bed.values) - self.scene.h_p.values


def _bed_function(params: SynthParams, rng, width_m, height_m, spacing):
    n = params.n_troughs
    cx = rng.uniform(0.1, 0.9, n) * width_m
    cy = rng.uniform(0.1, 0.9, n) * height_m
    depth = params.trough_depth * rng.uniform(0.5, 1.0, n)
    ang = rng.uniform(-0.35, 0.35, n)
    wl = params.trough_length_px * spacing * rng.uniform(0.7, 1.3, n)
    ww = params.trough_width_px * spacing * rng.uniform(0.7, 1.3, n)

    def bed(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        b = params.bed_top - params.bed_drop * (x / width_m)
        for i in range(n):
            dx, dy = x - cx[i], y - cy[i]
            along = dx * math.cos(ang[i]) + dy * math.sin(ang[i])
            across = -dx * math.sin(ang[i]) + dy * math.cos(ang[i])
            b = b - depth[i] * np.exp(-0.5 * ((along / wl[i]) ** 2 + (across / ww[i]) ** 2))
        return b

    return bed


def _bias_field(params: SynthParams, rng, X, Y, spacing):
    lam = params.bias_length_px * spacing
    field_ = np.zeros_like(X)
    for _ in range(4):
        theta = rng.uniform(0, 2 * math.pi)
        wl = lam * rng.uniform(0.8, 1.6)
        phase = rng.uniform(0, 2 * math.pi)
        field_ += np.cos(2 * math.pi * (X * math.cos(theta) + Y * math.sin(theta)) / wl + phase)
    peak = np.abs(field_).max()
    if peak > 0:
        field_ = field_ / peak
    return params.bias_offset + params.bias_amplitude * field_


def _line_picks(params: SynthParams, rng, geom: GridGeometry):
    xmin, xmax, ymin, ymax = geom.extent
    pts = []
    step = params.pick_step_px * geom.spacing
    for _ in range(params.n_lines):
        # a straight flight line through a random interior point
        px, py = rng.uniform(xmin, xmax), rng.uniform(ymin, ymax)
        theta = rng.uniform(0, math.pi)
        ux, uy = math.cos(theta), math.sin(theta)
        diag = math.hypot(xmax - xmin, ymax - ymin)
        t = np.arange(-diag, diag, step)
        lx, ly = px + t * ux, py + t * uy
        keep = geom.contains(lx, ly)
        pts.append(np.column_stack([lx[keep], ly[keep]]))
    return np.concatenate(pts) if pts else np.zeros((0, 2))


def synth_scene(seed: int, height: int, width: int, spacing: float = 150.0,
                params: SynthParams = SynthParams()) -> SyntheticCase:
    """Build a synthetic glacier scene whose true thickness conserves mass exactly.

    Deterministic for a given seed.  Raises ParameterError when the chosen
    troughs and surface would make the ice thinner than ``h_min``.
    """
    rng = np.random.default_rng(seed)
    geom = GridGeometry(height, width, spacing)
    X, Y = geom.cell_centers()
    width_m, height_m = width * spacing, height * spacing
    bed_fn = _bed_function(params, rng, width_m, height_m, spacing)
    b_true = bed_fn(X, Y)
    xn = X / width_m
    s = params.surface_top - params.surface_drop * (0.6 * xn + 0.4 * xn ** 2)
    h_true = s - b_true
    if h_true.min() < params.h_min:
        raise ParameterError(f"synthetic thickness falls to {h_true.min():.1f} m, below h_min={params.h_min}")

    # flux along +x, function of y only: a fast trunk with slower margins
    yn = (Y - 0.5 * height_m) / (0.5 * height_m)
    profile = 1.0 - params.shear_margin * yn ** 2
    qx = params.speed * float(np.mean(h_true)) * profile
    vx = qx / h_true
    vy = np.zeros_like(vx)
    smb = params.smb_mean + params.smb_lapse * (s - s.mean())
    dhdt = smb - stencil.div_xy(h_true * vx, h_true * vy, spacing)

    bias = _bias_field(params, rng, X, Y, spacing)
    b_p = b_true + bias

    if params.pick_pattern == "lines":
        pts = _line_picks(params, rng, geom)
    elif params.pick_pattern == "lattice":
        step = params.lattice_step
        pts = np.column_stack([X[::step, ::step].ravel(), Y[::step, ::step].ravel()])
    else:
        pts = np.zeros((0, 2))
    pb = bed_fn(pts[:, 0], pts[:, 1]) if len(pts) else np.zeros(0)
    if params.pick_noise > 0 and len(pts):
        pb = pb + rng.normal(0.0, params.pick_noise, len(pb))

    def R(a):
        return RasterGrid.like(geom, a)

    scene = Scene(R(s), VectorField(R(vx), R(vy)), R(smb), R(dhdt), R(b_p))
    picks = RadarPicks(pts[:, 0], pts[:, 1], pb)
    return SyntheticCase(scene, R(b_true), picks, R(bias))


def mass_residual_exact(scene: Scene, h: np.ndarray) -> np.ndarray:
    """Native-scale, unsmoothed mass residual ``dhdt + div(h v) - smb``."""
    return (scene.dhdt.values + stencil.div_xy(h * scene.vx, h * scene.vy, scene.geometry.spacing)
            - scene.smb.values)
