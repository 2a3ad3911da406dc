"""Loss terms of the residual-thickness objective and their analytic gradients.

Every term is a function of its natural variable (thickness ``h_hat``,
residual ``r`` or bed ``b_hat``) and returns ``(value, gradient)``.
:func:`total_loss` evaluates them on a normalized residual ``r_hat`` and
chains the gradients through ``r = sigma_t * r_hat + mu_t``,
``h_hat = h_p + r`` and ``b_hat = s - h_hat``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from . import stencil
from .data import NormStats, ObservationLayer, Scene
from .errors import EmptyObservationsError, NonFiniteLossError, ParameterError
from .grid import RasterGrid

TERMS = ("radar", "mass", "flowTV", "laplacian", "nonneg", "prior")


@dataclass(frozen=True)
class LossConfig:
    lambda_data: float = 2.0
    lambda_phys: float = 1e-2
    lambda_tv: float = 5e-4
    lambda_lap: float = 2e-4
    lambda_nonneg: float = 1e-3
    lambda_prior: float = 5e-3
    delta_radar: float = 1.0
    delta_mass: float = 5.0
    delta_prior: float = 10.0
    beta_perp: float = 0.9
    beta_par: float = 0.35
    conf_exponent: float = 2.0
    scales: tuple = (1, 2, 4)
    scale_weights: Optional[tuple] = None
    smoothing: bool = True
    smooth_early: tuple = (11, 3.5)
    smooth_late: tuple = (15, 5.0)
    smooth_switch: float = 0.5
    flow_eps: float = 1e-3
    abs_eta: float = 1e-3
    radar_eps: float = 1e-3
    slope_floor: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(int(k) for k in self.scales))
        if self.scale_weights is not None:
            object.__setattr__(self, "scale_weights", tuple(float(a) for a in self.scale_weights))
        object.__setattr__(self, "smooth_early", (int(self.smooth_early[0]), float(self.smooth_early[1])))
        object.__setattr__(self, "smooth_late", (int(self.smooth_late[0]), float(self.smooth_late[1])))
        lams = [self.lambda_data, self.lambda_phys, self.lambda_tv, self.lambda_lap,
                self.lambda_nonneg, self.lambda_prior]
        if any(not (lam >= 0) for lam in lams):
            raise ParameterError("loss weights must be non-negative")
        if min(self.delta_radar, self.delta_mass, self.delta_prior) <= 0:
            raise ParameterError("Huber deltas must be positive")
        if not self.beta_perp > self.beta_par >= 0:
            raise ParameterError("flow TV needs beta_perp > beta_par >= 0")
        if not self.scales or min(self.scales) < 1:
            raise ParameterError("pooling scales must be a non-empty set of positive integers")
        if self.scale_weights is not None and len(self.scale_weights) != len(self.scales):
            raise ParameterError("one weight per pooling scale is required")
        for size, sigma in (self.smooth_early, self.smooth_late):
            if size < 1 or size % 2 == 0 or sigma <= 0:
                raise ParameterError("smoothing kernels need odd size and positive sigma")
        if min(self.flow_eps, self.abs_eta, self.radar_eps, self.slope_floor) <= 0:
            raise ParameterError("epsilons must be positive")

    @property
    def alphas(self) -> tuple:
        if self.scale_weights is not None:
            return self.scale_weights
        return tuple(1.0 / len(self.scales) for _ in self.scales)

    def targets(self) -> dict:
        return {"radar": self.lambda_data, "mass": self.lambda_phys, "flowTV": self.lambda_tv,
                "laplacian": self.lambda_lap, "nonneg": self.lambda_nonneg,
                "prior": self.lambda_prior}

    def smoothing_at(self, progress: float):
        """Kernel ``(size, sigma)`` for a run progress fraction in [0, 1], or None."""
        if not self.smoothing:
            return None
        return self.smooth_early if progress < self.smooth_switch else self.smooth_late


@dataclass(frozen=True)
class Schedule:
    total_epochs: int = 6000
    phys_ramp_end: float = 0.9
    prior_ramp_start: float = 0.3
    prior_ramp_end: float = 0.9

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ParameterError("total_epochs must be >= 1")
        if not 0 < self.phys_ramp_end <= 1:
            raise ParameterError("phys_ramp_end must lie in (0, 1]")
        if not 0 <= self.prior_ramp_start < self.prior_ramp_end <= 1:
            raise ParameterError("prior ramp needs 0 <= start < end <= 1")

    def weights(self, config: LossConfig, epoch: float) -> dict:
        w = config.targets()
        w["mass"] = ramp_weight(epoch, self.total_epochs, config.lambda_phys, 0.0, self.phys_ramp_end)
        w["prior"] = ramp_weight(epoch, self.total_epochs, config.lambda_prior,
                                 self.prior_ramp_start, self.prior_ramp_end)
        return w

    def progress(self, epoch: float) -> float:
        return min(1.0, max(0.0, epoch / self.total_epochs))


@dataclass(eq=False)
class LossBreakdown:
    terms: dict
    weights: dict
    total: float
    gradient: np.ndarray

    def recombine(self) -> float:
        return math.fsum(self.weights[t] * self.terms[t] for t in TERMS)


def ramp_weight(epoch: float, total: float, target: float, start_frac: float,
                end_frac: float) -> float:
    """Zero before ``start_frac * total``, linear up to ``target`` at ``end_frac * total``."""
    if not start_frac < end_frac:
        raise ParameterError(f"ramp start {start_frac} must precede end {end_frac}")
    if total <= 0:
        raise ParameterError("total must be positive")
    t0, t1 = start_frac * total, end_frac * total
    if epoch <= t0:
        return 0.0
    if epoch >= t1:
        return float(target)
    return float(target) * (epoch - t0) / (t1 - t0)


# ---------------------------------------------------------------------------
# Elementwise penalties


def huber(t, delta: float):
    """Huber penalty and its derivative, elementwise."""
    t = np.asarray(t, dtype=float)
    a = np.abs(t)
    quad = a <= delta
    value = np.where(quad, 0.5 * t * t, delta * (a - 0.5 * delta))
    deriv = np.where(quad, t, delta * np.sign(t))
    if value.ndim == 0:
        return float(value), float(deriv)
    return value, deriv


def smooth_abs(t, eta: float):
    """``sqrt(t^2 + eta^2) - eta`` and its derivative; exactly zero at t = 0."""
    root = np.sqrt(t * t + eta * eta)
    return root - eta, t / root


# ---------------------------------------------------------------------------
# Individual terms


def loss_radar(h_hat: np.ndarray, obs: ObservationLayer, delta: float = 1.0,
               eps: float = 1e-3):
    """Confidence-weighted masked Huber misfit to splatted radar thickness."""
    m = obs.mask
    w = np.where(m, np.maximum(eps, obs.confidence), 0.0)
    Z = w.sum()
    if not Z > 0:
        raise EmptyObservationsError("radar term has no observed cells")
    diff = np.where(m, h_hat - np.where(m, obs.h_rad, 0.0), 0.0)
    rho, drho = huber(diff, delta)
    value = float(np.sum(w * rho) / Z)
    return value, w * drho / Z


def _mass_weight(obs: ObservationLayer, q: float) -> np.ndarray:
    return (1.0 - obs.confidence) ** q


@dataclass(eq=False)
class _MassScale:
    k: int
    alpha: float
    source: np.ndarray  # pooled dhdt - pooled smb
    weight: np.ndarray  # pooled (1 - c)^q


def _mass_scales(scene: Scene, obs: Optional[ObservationLayer], config: LossConfig):
    wfull = (np.ones(scene.geometry.shape) if obs is None
             else _mass_weight(obs, config.conf_exponent))
    src = scene.dhdt.values - scene.smb.values
    out = []
    for k, a in zip(config.scales, config.alphas):
        out.append(_MassScale(k, a, stencil.pool2(src, k), stencil.pool2(wfull, k)))
    return out


def _residual_at_scale(h_hat, vx, vy, spacing, k, source_k, smooth):
    qx = stencil.pool2(h_hat * vx, k)
    qy = stencil.pool2(h_hat * vy, k)
    if smooth is not None:
        qx = stencil.smooth2(qx, *smooth)
        qy = stencil.smooth2(qy, *smooth)
    return source_k + stencil.div_xy(qx, qy, spacing * k)


def mass_residual(h_hat, scene: Scene, scale: int = 1, smooth=None) -> RasterGrid:
    """Mass-conservation residual ``dhdt + div(h v) - smb`` at pooling factor ``scale``.

    The flux ``h * v`` and the forcing fields are block-averaged to the
    coarse grid; the flux is then smoothed with the ``(size, sigma)`` kernel
    (if given) before differencing at spacing ``scale * spacing``.
    """
    h = h_hat.values if isinstance(h_hat, RasterGrid) else np.asarray(h_hat, dtype=float)
    src = stencil.pool2(scene.dhdt.values - scene.smb.values, scale)
    R = _residual_at_scale(h, scene.vx, scene.vy, scene.geometry.spacing, scale, src, smooth)
    return RasterGrid(R, scene.geometry.spacing * scale, scene.geometry.origin)


def loss_mass(h_hat: np.ndarray, scene: Scene, obs: Optional[ObservationLayer],
              config: LossConfig = LossConfig(), progress: float = 0.0, _scales=None):
    """Multi-scale Huber penalty on the mass residual, weighted by ``(1 - c)^q``.

    ``progress`` (fraction of the run completed) selects the smoothing
    kernel.  Returns the value and its gradient with respect to ``h_hat``.
    """
    scales = _scales if _scales is not None else _mass_scales(scene, obs, config)
    smooth = config.smoothing_at(progress)
    spacing = scene.geometry.spacing
    vx, vy = scene.vx, scene.vy
    total = 0.0
    grad_h = np.zeros_like(h_hat, dtype=float)
    for sc in scales:
        R = _residual_at_scale(h_hat, vx, vy, spacing, sc.k, sc.source, smooth)
        rho, drho = huber(R, config.delta_mass)
        n = R.size
        total += sc.alpha * float(np.sum(sc.weight * rho)) / n
        gR = sc.alpha * sc.weight * drho / n
        gx, gy = stencil.div_xy_adjoint(gR, spacing * sc.k)
        if smooth is not None:
            gx = stencil.smooth2_adjoint(gx, *smooth)
            gy = stencil.smooth2_adjoint(gy, *smooth)
        gx = stencil.pool2_adjoint(gx, sc.k, h_hat.shape)
        gy = stencil.pool2_adjoint(gy, sc.k, h_hat.shape)
        grad_h += gx * vx + gy * vy
    return total, grad_h


def unit_flow(vx: np.ndarray, vy: np.ndarray, eps: float):
    """Unit flow direction ``u`` and its left normal ``u_perp``."""
    speed = np.hypot(vx, vy) + eps
    ux, uy = vx / speed, vy / speed
    return (ux, uy), (-uy, ux)


def loss_flow_tv(h_hat: np.ndarray, vx: np.ndarray, vy: np.ndarray, spacing: float,
                 beta_perp: float = 0.9, beta_par: float = 0.35, eps: float = 1e-3,
                 eta: float = 1e-3):
    """Anisotropic TV of thickness: cross-flow slopes cost ``beta_perp``, along-flow ``beta_par``."""
    (ux, uy), (px, py) = unit_flow(vx, vy, eps)
    gx, gy = stencil.grad_xy(h_hat, spacing)
    t_par = gx * ux + gy * uy
    t_perp = gx * px + gy * py
    a_par, d_par = smooth_abs(t_par, eta)
    a_perp, d_perp = smooth_abs(t_perp, eta)
    n = h_hat.size
    value = float(np.sum(beta_perp * a_perp + beta_par * a_par)) / n
    cx = (beta_perp * d_perp * px + beta_par * d_par * ux) / n
    cy = (beta_perp * d_perp * py + beta_par * d_par * uy) / n
    return value, stencil.grad_xy_adjoint(cx, cy, spacing)


def loss_laplacian(r: np.ndarray, eta: float = 1e-3):
    """Mean smoothed absolute value of the 5-point Laplacian of the residual."""
    lap = stencil.laplace5(r)
    a, d = smooth_abs(lap, eta)
    n = r.size
    return float(np.sum(a)) / n, stencil.laplace5_adjoint(d / n)


def loss_nonneg(h_hat: np.ndarray):
    neg = np.maximum(0.0, -h_hat)
    n = h_hat.size
    return float(np.sum(neg * neg)) / n, -2.0 * neg / n


def slope_weight(b_p: np.ndarray, spacing: float, valid=None, floor: float = 1e-6) -> np.ndarray:
    """``exp(-|grad b_p| / s90)`` with ``s90`` the 90th percentile of the slope magnitude."""
    gx, gy = stencil.grad_xy(b_p, spacing)
    mag = np.hypot(gx, gy)
    sel = np.ones(mag.shape, bool) if valid is None else np.asarray(valid, bool)
    s90 = max(floor, float(np.percentile(mag[sel], 90))) if sel.any() else floor
    return np.exp(-mag / s90)


def prior_weight(obs: Optional[ObservationLayer], slope_w: np.ndarray) -> np.ndarray:
    if obs is None:
        return slope_w
    return (1.0 - obs.mask) * (1.0 - obs.confidence) ** 2 * slope_w


def loss_prior(b_hat: np.ndarray, b_p: np.ndarray, obs: Optional[ObservationLayer],
               slope_w: np.ndarray, delta: float = 10.0, _weight=None):
    """Huber pull of the bed toward the prior, masked at picks and faded near them."""
    W = _weight if _weight is not None else prior_weight(obs, slope_w)
    rho, drho = huber(b_hat - b_p, delta)
    n = b_hat.size
    return float(np.sum(W * rho)) / n, W * drho / n


# ---------------------------------------------------------------------------
# Total objective


@dataclass(eq=False)
class LossContext:
    """Quantities that depend only on the scene and observations; built once per solve."""

    scene: Scene
    obs: ObservationLayer
    config: LossConfig
    mass_scales: list
    prior_w: np.ndarray
    h_p: np.ndarray

    @classmethod
    def build(cls, scene: Scene, obs: ObservationLayer, config: LossConfig) -> "LossContext":
        sw = slope_weight(scene.b_p.values, scene.geometry.spacing, scene.valid, config.slope_floor)
        return cls(scene, obs, config, _mass_scales(scene, obs, config), prior_weight(obs, sw),
                   scene.h_p.values)


def total_loss(r_hat: np.ndarray, norm: NormStats, scene: Scene, obs: ObservationLayer,
               config: LossConfig, schedule: Schedule, epoch: float,
               ctx: Optional[LossContext] = None) -> LossBreakdown:
    """Weighted sum of all six terms with the epoch's scheduled weights.

    The radar term is skipped (value 0) when the observation layer has no
    picks, e.g. for a tile far from any flight line.
    """
    if ctx is None:
        ctx = LossContext.build(scene, obs, config)
    sigma, mu = norm.sigma_t, norm.mu_t
    r = sigma * r_hat + mu
    h_hat = ctx.h_p + r
    b_hat = scene.s.values - h_hat
    weights = schedule.weights(config, epoch)
    progress = schedule.progress(epoch)
    cfg = config

    terms, grad_h, grad_r, grad_b = {}, np.zeros_like(r), np.zeros_like(r), np.zeros_like(r)

    def add(name, value, grad, into):
        if not np.isfinite(value):
            raise NonFiniteLossError(name, epoch)
        terms[name] = value
        if weights[name] != 0.0:
            into += weights[name] * grad

    if obs.empty:
        terms["radar"] = 0.0
    else:
        add("radar", *loss_radar(h_hat, obs, cfg.delta_radar, cfg.radar_eps), grad_h)
    add("mass", *loss_mass(h_hat, scene, obs, cfg, progress, ctx.mass_scales), grad_h)
    add("flowTV", *loss_flow_tv(h_hat, scene.vx, scene.vy, scene.geometry.spacing, cfg.beta_perp,
                                cfg.beta_par, cfg.flow_eps, cfg.abs_eta), grad_h)
    add("laplacian", *loss_laplacian(r, cfg.abs_eta), grad_r)
    add("nonneg", *loss_nonneg(h_hat), grad_h)
    add("prior", *loss_prior(b_hat, scene.b_p.values, obs, None, cfg.delta_prior, ctx.prior_w),
        grad_b)

    total = math.fsum(weights[t] * terms[t] for t in TERMS)
    if not math.isfinite(total):
        raise NonFiniteLossError("total", epoch)
    # dh/dr_hat = sigma, dr/dr_hat = sigma, db/dr_hat = -sigma
    gradient = sigma * (grad_h + grad_r - grad_b)
    return LossBreakdown(terms, weights, total, gradient)
