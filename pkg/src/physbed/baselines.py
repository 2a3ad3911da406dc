"""Inverse-distance weighting and residual kriging over a prior bed."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist

from .data import RadarPicks
from .errors import EmptyObservationsError, InsufficientDataError, ParameterError
from .grid import GridGeometry, RasterGrid

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class VariogramModel:
    """Exponential semivariogram ``nugget + sill * (1 - exp(-d / range))`` for d > 0."""

    nugget: float
    sill: float
    range: float
    degenerate: bool = False

    def __post_init__(self):
        if self.nugget < 0 or not self.sill > 0 or not self.range > 0:
            raise ParameterError(f"invalid variogram {self}")

    def gamma(self, d):
        d = np.asarray(d, dtype=float)
        g = self.nugget + self.sill * (1.0 - np.exp(-d / self.range))
        return np.where(d > 0, g, 0.0)

    def covariance(self, d):
        """``sill * exp(-d / range)`` off zero, ``sill + nugget`` at d = 0."""
        d = np.asarray(d, dtype=float)
        return np.where(d > 0, self.sill * np.exp(-d / self.range), self.sill + self.nugget)


@dataclass(frozen=True)
class BaselineConfig:
    idw_k: int = 12
    idw_power: float = 2.0
    krige_k: int = 16
    krige_mode: str = "ordinary"
    n_bins: int = 15
    max_lag: Optional[float] = None
    max_variogram_points: int = 4000

    def __post_init__(self):
        if self.idw_k < 1 or self.krige_k < 1:
            raise ParameterError("neighbor counts must be >= 1")
        if not self.idw_power > 0:
            raise ParameterError("IDW power must be positive")
        if self.krige_mode not in ("simple", "ordinary"):
            raise ParameterError(f"unknown kriging mode '{self.krige_mode}'")
        if self.n_bins < 1 or self.max_variogram_points < 2:
            raise ParameterError("n_bins must be >= 1 and max_variogram_points >= 2")


# ---------------------------------------------------------------------------
# IDW


def exact_hits(picks: RadarPicks, geometry: GridGeometry):
    """For each cell containing a pick, the index of the pick nearest its center.

    Returns ``(flat_cells, pick_index)``.  ``picks`` should be canonical so
    equal-distance ties resolve independently of input order.
    """
    inside = geometry.contains(picks.x, picks.y)
    ids = np.flatnonzero(inside)
    if ids.size == 0:
        return np.zeros(0, int), np.zeros(0, int)
    row, col = geometry.cell_index(picks.x[ids], picks.y[ids])
    X, Y = geometry.x_centers()[col], geometry.y_centers()[row]
    d = np.hypot(picks.x[ids] - X, picks.y[ids] - Y)
    flat = row * geometry.width + col
    order = np.lexsort((ids, d, flat))
    flat, ids = flat[order], ids[order]
    first = np.r_[True, flat[1:] != flat[:-1]]
    return flat[first], ids[first]


def idw_interpolate(picks: RadarPicks, geometry: GridGeometry, k: int = 12,
                    power: float = 2.0) -> RasterGrid:
    """k-nearest-neighbor inverse-distance weighting of pick values at cell centers.

    A cell whose own extent contains a pick (within half a cell of the center
    on both axes) takes that pick's value verbatim.
    """
    if picks.count == 0:
        raise EmptyObservationsError("IDW needs at least one pick")
    if k < 1 or not power > 0:
        raise ParameterError("k must be >= 1 and power > 0")
    picks = picks.canonical()
    X, Y = geometry.cell_centers()
    q = np.column_stack([X.ravel(), Y.ravel()])
    kk = min(k, picks.count)
    d, idx = cKDTree(np.column_stack([picks.x, picks.y])).query(q, k=kk)
    d = d.reshape(len(q), kk)
    idx = idx.reshape(len(q), kk)
    with np.errstate(divide="ignore"):
        w = d ** (-power)
    hit = ~np.isfinite(w).all(axis=1)
    w[hit] = 0.0
    out = np.full(len(q), np.nan)
    ok = ~hit
    out[ok] = np.sum(w[ok] * picks.bed[idx[ok]], axis=1) / np.sum(w[ok], axis=1)
    # zero distance at a non-containing cell cannot happen; exact hits below cover it
    cells, which = exact_hits(picks, geometry)
    out[cells] = picks.bed[which]
    if np.isnan(out).any():
        bad = np.isnan(out)
        out[bad] = picks.bed[idx[bad, 0]]
    return RasterGrid.like(geometry, out.reshape(geometry.shape))


# ---------------------------------------------------------------------------
# Variogram


def empirical_variogram(x, y, z, n_bins: int = 15, max_lag: Optional[float] = None,
                        max_points: Optional[int] = None):
    """Cressie-Hawkins robust semivariogram in uniform lag bins.

    ``gamma = mean(|dz|^(1/2))^4 / (0.914 + 0.988 / N)`` per bin, where N is
    the bin's pair count.  Returns a list of ``(mean lag, gamma, N)`` with
    empty bins omitted.  ``max_lag`` defaults to half the diagonal of the
    points' bounding box.  With more than ``max_points`` points an evenly
    strided subset (in sorted order) is used.
    """
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    z = np.asarray(z, dtype=float).ravel()
    if len(x) < 2:
        raise InsufficientDataError("a variogram needs at least two points")
    if max_points is not None and len(x) > max_points:
        order = np.lexsort((z, y, x))
        keep = order[np.linspace(0, len(x) - 1, max_points).round().astype(int)]
        x, y, z = x[keep], y[keep], z[keep]
    if max_lag is None:
        max_lag = 0.5 * math.hypot(np.ptp(x), np.ptp(y))
    if not max_lag > 0:
        raise InsufficientDataError("points are coincident; no positive lags")
    pts = np.column_stack([x, y])
    d = pdist(pts)
    dz = np.sqrt(np.abs(pdist(z[:, None], "cityblock")))
    keep = (d > 0) & (d <= max_lag)
    d, dz = d[keep], dz[keep]
    b = np.minimum((d / max_lag * n_bins).astype(int), n_bins - 1)
    n = np.bincount(b, minlength=n_bins)
    sd = np.bincount(b, weights=d, minlength=n_bins)
    sz = np.bincount(b, weights=dz, minlength=n_bins)
    out = []
    for i in range(n_bins):
        if n[i] == 0:
            continue
        g = (sz[i] / n[i]) ** 4 / (0.914 + 0.988 / n[i])
        out.append((sd[i] / n[i], float(g), int(n[i])))
    return out


def _wls_objective(params, lag, gam, cnt):
    nugget, sill, rng = params
    model = nugget + sill * (1.0 - np.exp(-lag / rng))
    return float(np.sum(cnt * (gam - model) ** 2 / model ** 2))


def _coordinate_descent(p0, lag, gam, cnt, bounds, sweeps=200, tol=1e-12):
    """Cyclic 1-D bounded minimization; sill and range are searched in log space."""
    p = list(p0)
    f = _wls_objective(p, lag, gam, cnt)
    for _ in range(sweeps):
        f_old = f
        for i in range(3):
            lo, hi = bounds[i]
            if i == 0:
                def g(t):
                    q = list(p)
                    q[0] = t
                    return _wls_objective(q, lag, gam, cnt)
                res = minimize_scalar(g, bounds=(lo, hi), method="bounded",
                                      options={"xatol": 1e-10 * max(hi, 1.0)})
                cand = res.x
            else:
                def g(t):
                    q = list(p)
                    q[i] = math.exp(t)
                    return _wls_objective(q, lag, gam, cnt)
                res = minimize_scalar(g, bounds=(math.log(lo), math.log(hi)), method="bounded",
                                      options={"xatol": 1e-10})
                cand = math.exp(res.x)
            if res.fun < f:
                p[i], f = cand, res.fun
        if f_old - f <= tol * max(f_old, 1e-300):
            break
    return p, f


def fit_exponential_variogram(points, starts=None) -> VariogramModel:
    """Weighted least-squares fit of an exponential model to empirical points.

    Minimizes ``sum N (gamma_hat - gamma_model)^2 / gamma_model^2`` by
    coordinate descent from a small grid of starting points and keeps the
    best.  All-zero semivariances give a flagged degenerate model.
    """
    pts = [p for p in points if p[2] > 0]
    if len(pts) < 3:
        raise InsufficientDataError(f"need at least 3 non-empty lag bins, got {len(pts)}")
    lag = np.array([p[0] for p in pts], dtype=float)
    gam = np.array([p[1] for p in pts], dtype=float)
    cnt = np.array([p[2] for p in pts], dtype=float)
    gmax, lmax = float(gam.max()), float(lag.max())
    if gmax <= 0:
        log.warning("all semivariances are zero; returning a degenerate variogram")
        return VariogramModel(0.0, 1e-12, lmax / 3.0, degenerate=True)
    bounds = [(0.0, 2.0 * gmax), (1e-9 * gmax, 10.0 * gmax), (1e-3 * lmax, 100.0 * lmax)]
    if starts is None:
        starts = [(n * gmax, s * gmax, r * lmax)
                  for n in (0.0, 0.2) for s in (0.5, 1.0) for r in (0.1, 0.3, 1.0)]
    best, best_f = None, math.inf
    for p0 in starts:
        p, f = _coordinate_descent(p0, lag, gam, cnt, bounds)
        if f < best_f:
            best, best_f = p, f
    return VariogramModel(float(best[0]), float(best[1]), float(best[2]))


def weighted_misfit(model: VariogramModel, points) -> float:
    lag = np.array([p[0] for p in points], dtype=float)
    gam = np.array([p[1] for p in points], dtype=float)
    cnt = np.array([p[2] for p in points], dtype=float)
    return _wls_objective((model.nugget, model.sill, model.range), lag, gam, cnt)


# ---------------------------------------------------------------------------
# Kriging


def _solve_system(model: VariogramModel, P, Q, ordinary: bool, jitter: bool):
    """Kriging systems for a batch: ``P`` (B, k, 2) neighbor coords, ``Q`` (B, 2) targets."""
    B, k, _ = P.shape
    dpp = np.linalg.norm(P[:, :, None, :] - P[:, None, :, :], axis=-1)
    dpq = np.linalg.norm(P - Q[:, None, :], axis=-1)
    K = model.covariance(dpp)
    c = model.covariance(dpq)
    if jitter:
        K = K + 1e-8 * (model.sill + model.nugget) * np.eye(k)
    if ordinary:
        A = np.ones((B, k + 1, k + 1))
        A[:, :k, :k] = K
        A[:, k, k] = 0.0
        rhs = np.concatenate([c, np.ones((B, 1))], axis=1)
    else:
        A, rhs = K, c
    sol = np.linalg.solve(A, rhs[..., None])[..., 0]
    return sol[:, :k]


def krige_points(model: VariogramModel, px, py, pz, qx, qy, k: int = 16,
                 mode: str = "ordinary", batch: int = 4096, return_weights: bool = False):
    """Kriging estimates of ``pz`` at query points with a k-nearest neighborhood.

    Simple mode assumes a known zero mean.  Cells whose system stays
    singular after one diagonal jitter fall back to inverse-distance
    weighting of the same neighbors.  Returns ``(estimate, n_fallback)``
    and, with ``return_weights``, also the weights and neighbor indices.
    """
    if mode not in ("simple", "ordinary"):
        raise ParameterError(f"unknown kriging mode '{mode}'")
    pts = np.column_stack([np.asarray(px, float), np.asarray(py, float)])
    pz = np.asarray(pz, dtype=float)
    if len(pts) == 0:
        raise EmptyObservationsError("kriging needs at least one pick")
    q = np.column_stack([np.asarray(qx, float).ravel(), np.asarray(qy, float).ravel()])
    kk = min(k, len(pts))
    _, idx = cKDTree(pts).query(q, k=kk)
    idx = idx.reshape(len(q), kk)
    ordinary = mode == "ordinary"
    W = np.zeros((len(q), kk))
    fallback = 0
    for s in range(0, len(q), batch):
        sl = slice(s, s + batch)
        P, Q = pts[idx[sl]], q[sl]
        try:
            w = _solve_system(model, P, Q, ordinary, jitter=False)
            bad = ~np.isfinite(w).all(axis=1)
        except np.linalg.LinAlgError:
            w = np.zeros((len(Q), kk))
            bad = np.ones(len(Q), bool)
        for j in np.flatnonzero(bad):
            try:
                wj = _solve_system(model, P[j:j + 1], Q[j:j + 1], ordinary, jitter=True)[0]
                if not np.isfinite(wj).all():
                    raise np.linalg.LinAlgError("non-finite weights")
            except np.linalg.LinAlgError:
                fallback += 1
                d = np.linalg.norm(P[j] - Q[j], axis=1)
                if (d == 0).any():
                    wj = (d == 0) / np.count_nonzero(d == 0)
                else:
                    wj = d ** -2.0
                    wj = wj / wj.sum()
            w[j] = wj
        W[sl] = w
    est = np.sum(W * pz[idx], axis=1)
    if fallback:
        log.warning("kriging fell back to IDW at %d cell(s)", fallback)
    if return_weights:
        return est, fallback, W, idx
    return est, fallback


def pick_residuals(picks: RadarPicks, prior_bed: RasterGrid) -> np.ndarray:
    """Pick bed minus the prior bed of the containing cell."""
    row, col = prior_bed.geometry.cell_index(picks.x, picks.y)
    return picks.bed - prior_bed.values[row, col]


def krige_residual(picks: RadarPicks, prior_bed: RasterGrid, config: BaselineConfig = BaselineConfig(),
                   model: Optional[VariogramModel] = None, return_info: bool = False):
    """Krige pick-minus-prior residuals onto the grid and add the prior back.

    Fits the variogram on ``picks`` unless ``model`` is given.  With
    ``return_info`` also returns a dict holding the model, the empirical
    points and the number of cells that fell back to IDW.
    """
    if picks.count == 0:
        raise EmptyObservationsError("kriging needs at least one pick")
    picks = picks.canonical()
    res = pick_residuals(picks, prior_bed)
    points = None
    if model is None:
        points = empirical_variogram(picks.x, picks.y, res, config.n_bins, config.max_lag,
                                     config.max_variogram_points)
        model = fit_exponential_variogram(points)
        log.info("variogram nugget=%.6g sill=%.6g range=%.6g", model.nugget, model.sill, model.range)
    X, Y = prior_bed.geometry.cell_centers()
    est, fallback = krige_points(model, picks.x, picks.y, res, X, Y, config.krige_k,
                                 config.krige_mode)
    bed = prior_bed.with_values(prior_bed.values + est.reshape(X.shape))
    if return_info:
        return bed, {"model": model, "points": points, "fallback_cells": fallback}
    return bed
