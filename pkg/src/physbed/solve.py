"""Direct minimization of the residual objective over the normalized residual grid.

The unknown is ``r_hat`` itself.  Each epoch is one full-batch step of Adam
with decoupled weight decay under a cosine learning rate with warm
restarts; an exponential moving average of ``r_hat`` is the evaluation
state.  :func:`solve_tiled` runs independent solves on overlapping windows
and stitches their cores; :func:`tta_solve` averages solves over the eight
symmetries of the square.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .data import NormStats, ObservationLayer, Scene, observations_from_mask
from .errors import DimensionError, ParameterError
from .grid import DihedralElement, RasterGrid, VectorField, transform_scalar, transform_vector
from .physics import TERMS, LossConfig, LossContext, Schedule, huber, total_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ReconState:
    r_hat: RasterGrid
    norm: NormStats
    scene: Scene

    def __post_init__(self):
        if self.r_hat.geometry != self.scene.geometry:
            raise DimensionError("r_hat must live on the scene grid")

    @property
    def r(self) -> np.ndarray:
        return self.norm.sigma_t * self.r_hat.values + self.norm.mu_t


@dataclass(frozen=True)
class SolverConfig:
    """Optimizer settings.

    ``lr`` is the peak step of the cosine schedule.  Adam moves each cell by
    roughly ``lr`` per epoch, so it must be large enough for ``r_hat`` (order
    one) to be reachable within ``max_epochs``.
    """

    max_epochs: int = 6000
    lr: float = 1e-2
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t0: int = 500
    t_mult: int = 2
    ema_decay: float = 0.999
    patience: int = 2000
    monitor_every: int = 10
    seed: int = 42

    def __post_init__(self):
        if not self.lr > 0:
            raise ParameterError("lr must be positive")
        if not 0 <= self.ema_decay < 1:
            raise ParameterError("ema_decay must lie in [0, 1)")
        if self.patience < 1 or self.max_epochs < 0 or self.monitor_every < 1:
            raise ParameterError("patience and monitor_every must be >= 1, max_epochs >= 0")
        if self.t0 < 1 or self.t_mult < 1:
            raise ParameterError("t0 and t_mult must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0 or self.weight_decay < 0:
            raise ParameterError("invalid Adam hyperparameters")


@dataclass(frozen=True)
class TileConfig:
    patch: int = 256
    stride: int = 64
    border: int = 96

    def __post_init__(self):
        if not 0 <= 2 * self.border < self.patch:
            raise ParameterError(f"need 0 <= 2*border < patch, got border={self.border}, patch={self.patch}")
        if not 1 <= self.stride <= self.patch - 2 * self.border:
            raise ParameterError("stride must be in [1, patch - 2*border] so cores leave no gaps")


def reconstruct(state: ReconState) -> tuple[RasterGrid, RasterGrid]:
    """Thickness ``h_p + sigma_t * r_hat + mu_t`` and bed ``s - h_hat``."""
    sc = state.scene
    h = sc.h_p.values + state.r
    return sc.s.with_values(h), sc.s.with_values(sc.s.values - h)


def ema_update(shadow, current, alpha: float):
    """``alpha * shadow + (1 - alpha) * current``; accepts arrays or RasterGrids."""
    if not 0 <= alpha < 1:
        raise ParameterError(f"EMA decay must lie in [0, 1), got {alpha}")
    a = shadow.values if isinstance(shadow, RasterGrid) else np.asarray(shadow, dtype=float)
    b = current.values if isinstance(current, RasterGrid) else np.asarray(current, dtype=float)
    if a.shape != b.shape:
        raise DimensionError(f"EMA shape mismatch {a.shape} vs {b.shape}")
    out = alpha * a + (1.0 - alpha) * b
    if isinstance(shadow, RasterGrid):
        return shadow.with_values(out)
    return out


def cosine_warm_restart_lr(epoch: int, base_lr: float, t0: int = 500, t_mult: int = 2,
                           eta_min: float = 0.0) -> float:
    """SGDR schedule: cycles of length ``t0, t0*t_mult, ...`` each annealed from base to ``eta_min``."""
    t_cur, t_i = epoch, t0
    while t_cur >= t_i:
        t_cur -= t_i
        t_i *= t_mult
    return eta_min + 0.5 * (base_lr - eta_min) * (1.0 + math.cos(math.pi * t_cur / t_i))


class AdamW:
    """Adam with decoupled weight decay on a single array parameter."""

    def __init__(self, shape, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, p: np.ndarray, grad: np.ndarray, lr: Optional[float] = None) -> np.ndarray:
        lr = self.lr if lr is None else lr
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        p = p * (1 - lr * self.wd)
        return p - lr * mhat / (np.sqrt(vhat) + self.eps)


def radar_monitor(r_hat: np.ndarray, norm: NormStats, scene: Scene, obs: ObservationLayer,
                  cells: np.ndarray, delta: float = 1.0) -> float:
    """Mean Huber misfit of thickness to radar over observed ``cells``; NaN if none."""
    sel = obs.mask & cells
    if not sel.any():
        return math.nan
    h = scene.h_p.values[sel] + norm.sigma_t * r_hat[sel] + norm.mu_t
    rho, _ = huber(h - obs.h_rad[sel], delta)
    return float(np.mean(rho))


def solve_variational(scene: Scene, obs: ObservationLayer, norm: NormStats,
                      loss_config: LossConfig = LossConfig(), schedule: Optional[Schedule] = None,
                      solver: SolverConfig = SolverConfig(), region=None, monitor_cells=None):
    """Minimize the total loss over ``r_hat`` inside ``region``.

    Cells outside ``region`` are frozen at ``r_hat = 0``.  The monitor is the
    radar fit over ``monitor_cells`` (default ``region``), evaluated on the
    bias-corrected EMA every ``monitor_every`` epochs; the best monitored
    EMA state is returned together with a per-epoch history (list of dicts).
    Without observed monitor cells the final EMA state is returned.
    """
    shape = scene.geometry.shape
    region = np.ones(shape, bool) if region is None else np.asarray(region, bool)
    if region.shape != shape:
        raise DimensionError("region mask must match the scene grid")
    monitor_cells = region if monitor_cells is None else np.asarray(monitor_cells, bool)
    if schedule is None:
        schedule = Schedule(max(1, solver.max_epochs))
    ctx = LossContext.build(scene, obs, loss_config)
    opt = AdamW(shape, solver.lr, (solver.beta1, solver.beta2), solver.eps, solver.weight_decay)

    r_hat = np.zeros(shape)
    shadow = np.zeros(shape)
    alpha = solver.ema_decay
    best = math.inf
    best_state = r_hat.copy()
    best_epoch = 0
    history = []
    monitor0 = radar_monitor(r_hat, norm, scene, obs, monitor_cells, loss_config.delta_radar)
    has_monitor = math.isfinite(monitor0)
    if has_monitor:
        best = monitor0

    for epoch in range(solver.max_epochs):
        br = total_loss(r_hat, norm, scene, obs, loss_config, schedule, epoch, ctx)
        lr = cosine_warm_restart_lr(epoch, solver.lr, solver.t0, solver.t_mult)
        grad = np.where(region, br.gradient, 0.0)
        r_hat = np.where(region, opt.step(r_hat, grad, lr), 0.0)
        shadow = ema_update(shadow, r_hat, alpha)
        ema = shadow / (1.0 - alpha ** (epoch + 1))

        row = {"epoch": epoch, **{t: br.terms[t] for t in TERMS}, "total": br.total, "lr": lr,
               "monitor": math.nan}
        done = epoch + 1 == solver.max_epochs
        if has_monitor and ((epoch + 1) % solver.monitor_every == 0 or done):
            mon = radar_monitor(ema, norm, scene, obs, monitor_cells, loss_config.delta_radar)
            row["monitor"] = mon
            if mon < best:
                best, best_state, best_epoch = mon, ema.copy(), epoch + 1
            elif epoch + 1 - best_epoch >= solver.patience:
                history.append(row)
                log.info("early stop at epoch %d (best %d)", epoch + 1, best_epoch)
                break
        history.append(row)

    if not has_monitor:
        best_state = shadow / (1.0 - alpha ** solver.max_epochs) if solver.max_epochs else r_hat
    state = ReconState(scene.s.with_values(best_state), norm, scene)
    return state, history


# ---------------------------------------------------------------------------
# Tiling


@dataclass(frozen=True)
class Tile:
    row0: int
    col0: int
    height: int
    width: int
    # core window in tile-local coordinates
    core_r0: int
    core_c0: int
    core_h: int
    core_w: int

    @property
    def extent(self):
        return (self.row0, self.col0, self.height, self.width)

    @property
    def core_extent(self):
        """Core window in global coordinates ``(row0, col0, height, width)``."""
        return (self.row0 + self.core_r0, self.col0 + self.core_c0, self.core_h, self.core_w)


def _axis_origins(n: int, patch: int, stride: int) -> list[int]:
    if n <= patch:
        return [0]
    starts = list(range(0, n - patch + 1, stride))
    if starts[-1] != n - patch:
        starts.append(n - patch)
    return starts


def _axis_core(o: int, size: int, n: int, border: int):
    lo = 0 if o == 0 else border
    hi = size if o + size == n else size - border
    return lo, hi - lo


def tile_layout(shape, config: TileConfig = TileConfig()) -> list[Tile]:
    """Overlapping windows in row-major order.

    Along each axis windows start every ``stride`` cells with a final window
    flush with the far edge; a grid no larger than ``patch`` is one window.
    Cores are inset by ``border`` except on sides lying on the grid edge.
    """
    H, W = shape
    tiles = []
    for r0 in _axis_origins(H, config.patch, config.stride):
        th = min(config.patch, H)
        cr, ch = _axis_core(r0, th, H, config.border)
        for c0 in _axis_origins(W, config.patch, config.stride):
            tw = min(config.patch, W)
            cc, cw = _axis_core(c0, tw, W, config.border)
            tiles.append(Tile(r0, c0, th, tw, cr, cc, ch, cw))
    return tiles


def core_count(shape, tiles) -> np.ndarray:
    """How many tile cores cover each cell."""
    count = np.zeros(shape, dtype=int)
    for t in tiles:
        r, c, h, w = t.core_extent
        count[r:r + h, c:c + w] += 1
    return count


def stitch_cores(shape, tiles, values) -> np.ndarray:
    """Average tile-local arrays over their cores.

    Accumulation runs in (row0, col0) order whatever order ``tiles`` come
    in, so the result is bit-identical under permutation.
    """
    order = sorted(range(len(tiles)), key=lambda i: (tiles[i].row0, tiles[i].col0))
    acc = np.zeros(shape)
    count = np.zeros(shape)
    for i in order:
        t, v = tiles[i], values[i]
        r, c, h, w = t.core_extent
        acc[r:r + h, c:c + w] += v[t.core_r0:t.core_r0 + h, t.core_c0:t.core_c0 + w]
        count[r:r + h, c:c + w] += 1
    if (count == 0).any():
        raise ParameterError("tile cores leave cells uncovered")
    return acc / count


def _solve_tile(args):
    tile, scene, obs, norm, loss_config, schedule, solver, region, monitor_cells = args
    r0, c0, h, w = tile.extent
    sl = (slice(r0, r0 + h), slice(c0, c0 + w))
    sub_scene = scene.crop(r0, c0, h, w)
    sub_obs = obs.crop(r0, c0, h, w)
    state, history = solve_variational(sub_scene, sub_obs, norm, loss_config, schedule, solver,
                                       region[sl], monitor_cells[sl])
    return state.r_hat.values, len(history)


def solve_tiled(scene: Scene, obs: ObservationLayer, norm: NormStats,
                loss_config: LossConfig = LossConfig(), schedule: Optional[Schedule] = None,
                solver: SolverConfig = SolverConfig(), tiles: TileConfig = TileConfig(),
                region=None, monitor_cells=None, jobs: int = 1) -> ReconState:
    """Solve every window independently and average their cores.

    Each window gets its own observation layer (distances recomputed inside
    the window) but shares the global normalization.  ``jobs > 1`` solves
    windows in worker processes; the stitched result does not depend on it.
    """
    shape = scene.geometry.shape
    region = np.ones(shape, bool) if region is None else np.asarray(region, bool)
    monitor_cells = region if monitor_cells is None else np.asarray(monitor_cells, bool)
    layout = tile_layout(shape, tiles)
    work = [(t, scene, obs, norm, loss_config, schedule, solver, region, monitor_cells)
            for t in layout]
    if jobs > 1 and len(layout) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_solve_tile, work))
    else:
        results = [_solve_tile(w) for w in work]
    r_hat = stitch_cores(shape, layout, [res[0] for res in results])
    r_hat = np.where(region, r_hat, 0.0)
    return ReconState(scene.s.with_values(r_hat), norm, scene)


# ---------------------------------------------------------------------------
# Dihedral averaging


def transform_scene(scene: Scene, g: DihedralElement) -> Scene:
    vx, vy = transform_vector(scene.vx, scene.vy, g)
    geom = scene.geometry
    rot = geom if g.quarter_turns % 2 == 0 else replace(geom, height=geom.width, width=geom.height)

    def R(a):
        return RasterGrid.like(rot, a)

    return Scene(R(transform_scalar(scene.s.values, g)), VectorField(R(vx), R(vy)),
                 R(transform_scalar(scene.smb.values, g)), R(transform_scalar(scene.dhdt.values, g)),
                 R(transform_scalar(scene.b_p.values, g)), transform_scalar(scene.valid, g))


def transform_observations(obs: ObservationLayer, g: DihedralElement) -> ObservationLayer:
    return observations_from_mask(transform_scalar(obs.mask, g), transform_scalar(obs.h_rad, g),
                                  obs.tau)


def _tree_mean(arrays):
    """Pairwise sum in a fixed tree, then divide; exact for identical inputs."""
    level = list(arrays)
    while len(level) > 1:
        nxt = [level[i] + level[i + 1] for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0] / len(arrays)


def tta_solve(scene: Scene, obs: ObservationLayer, norm: NormStats,
              loss_config: LossConfig = LossConfig(), schedule: Optional[Schedule] = None,
              solver: SolverConfig = SolverConfig(), region=None, monitor_cells=None,
              solve_fn: Optional[Callable] = None) -> ReconState:
    """Average solves over the 8 dihedral transforms of a square scene.

    ``solve_fn(scene, obs, region, monitor_cells) -> r_hat array`` runs one
    solve on a transformed problem; the default is a whole-grid
    :func:`solve_variational`.  Each result is mapped back with the inverse
    transform before averaging.
    """
    H, W = scene.geometry.shape
    if H != W:
        raise DimensionError(f"dihedral averaging needs a square grid, got {H}x{W}")
    region = np.ones((H, W), bool) if region is None else np.asarray(region, bool)
    monitor_cells = region if monitor_cells is None else np.asarray(monitor_cells, bool)
    if solve_fn is None:
        def solve_fn(sc, ob, reg, mon):
            st, _ = solve_variational(sc, ob, norm, loss_config, schedule, solver, reg, mon)
            return st.r_hat.values

    outs = []
    for g in DihedralElement.elements():
        r = solve_fn(transform_scene(scene, g), transform_observations(obs, g),
                     transform_scalar(region, g), transform_scalar(monitor_cells, g))
        outs.append(transform_scalar(np.asarray(r, dtype=float), g.inverse()))
    return ReconState(scene.s.with_values(_tree_mean(outs)), norm, scene)
