"""``physbed`` command line: synth, reconstruct, baseline and eval subcommands."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .baselines import (empirical_variogram, fit_exponential_variogram, idw_interpolate,
                        krige_residual, pick_residuals)
from .config import PICKS_FILE, SCENE_FILES, TRUTH_FILE, RunConfig, load_config
from .data import build_observations, residual_norm_stats, splat_picks, synth_scene, Scene
from .errors import DimensionError, ParameterError, PhysbedError
from .evaluation import block_split, evaluate
from .grid import RasterGrid, VectorField, distance_transform
from .io import read_picks, read_raster, write_picks, write_raster
from .physics import TERMS
from .solve import reconstruct, solve_tiled, solve_variational, tta_solve

log = logging.getLogger("physbed")


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command: str, config: RunConfig, files, extra=None) -> str:
    manifest = {
        "command": command,
        "version": __version__,
        "seed": config.seed,
        "config": config.to_dict(),
        "files": {os.path.basename(f): sha256(f) for f in files},
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(out_dir, f"manifest_{command}.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _out_dir(config: RunConfig) -> str:
    d = config.output_dir()
    os.makedirs(d, exist_ok=True)
    return d


def load_scene(scene_dir) -> Scene:
    """Read the six scene rasters from a directory and validate their geometry."""
    grids = {k: read_raster(os.path.join(scene_dir, name)) for k, name in SCENE_FILES.items()}
    valid = np.logical_and.reduce([g.valid_mask for g in grids.values()])
    fill = {k: np.where(valid, g.values, 0.0) for k, g in grids.items()}
    geom = grids["s"].geometry

    def R(k):
        if grids[k].geometry != geom:
            raise DimensionError(f"raster '{SCENE_FILES[k]}' does not match the surface grid")
        return RasterGrid.like(geom, fill[k])

    return Scene(R("s"), VectorField(R("vx"), R("vy")), R("smb"), R("dhdt"), R("b_p"), valid)


def _scene_inputs(config: RunConfig):
    if not config.paths.scene_dir:
        raise ParameterError("paths.scene_dir is required")
    scene = load_scene(config.paths.scene_dir)
    picks_path = config.paths.picks or os.path.join(config.paths.scene_dir, PICKS_FILE)
    picks = read_picks(picks_path, scene.geometry)
    return scene, picks


# ---------------------------------------------------------------------------


def cmd_synth(config: RunConfig) -> list:
    sc = config.synth
    case = synth_scene(config.seed, sc.height, sc.width, sc.spacing, sc.params)
    out = _out_dir(config)
    files = []
    scene = case.scene
    fields = {"s": scene.s, "vx": scene.v.x, "vy": scene.v.y, "smb": scene.smb,
              "dhdt": scene.dhdt, "b_p": scene.b_p}
    for key, grid in fields.items():
        path = os.path.join(out, SCENE_FILES[key])
        write_raster(path, grid)
        files.append(path)
    path = os.path.join(out, TRUTH_FILE)
    write_raster(path, case.truth_bed)
    files.append(path)
    path = os.path.join(out, PICKS_FILE)
    write_picks(path, case.picks)
    files.append(path)
    files.append(write_manifest(out, "synth", config, files))
    return files


def cmd_reconstruct(config: RunConfig, jobs: int = 1) -> list:
    scene, picks = _scene_inputs(config)
    sp = config.split
    train, test = block_split(scene.geometry, sp.axis, sp.buffer, sp.erode_all)
    obs = build_observations(picks, scene, config.observation)
    norm = residual_norm_stats(obs, scene, train.mask, config.observation.sigma_floor)
    log.info("normalization mu_t=%.6g sigma_t=%.6g", norm.mu_t, norm.sigma_t)
    schedule = config.schedule.build(config.solver.max_epochs)
    region = scene.valid
    monitor = train.mask & scene.valid
    history = []
    if config.tta:
        if config.mode == "tiled":
            def solve_fn(sc, ob, reg, mon):
                return solve_tiled(sc, ob, norm, config.loss, schedule, config.solver,
                                   config.tiles, reg, mon, jobs).r_hat.values
        else:
            solve_fn = None
        state = tta_solve(scene, obs, norm, config.loss, schedule, config.solver, region, monitor,
                          solve_fn)
    elif config.mode == "tiled":
        state = solve_tiled(scene, obs, norm, config.loss, schedule, config.solver, config.tiles,
                            region, monitor, jobs)
    else:
        state, history = solve_variational(scene, obs, norm, config.loss, schedule, config.solver,
                                           region, monitor)
    h, b = reconstruct(state)
    out = _out_dir(config)
    files = []
    for name, grid in (("r_hat.asc", state.r_hat), ("thickness.asc", h), ("bed.asc", b)):
        path = os.path.join(out, name)
        write_raster(path, grid)
        files.append(path)
    path = os.path.join(out, "history.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        cols = ["epoch", *TERMS, "total", "lr", "monitor"]
        w.writerow(cols)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in cols[1:]])
    files.append(path)
    extra = {"norm": {"mu_t": norm.mu_t, "sigma_t": norm.sigma_t},
             "epochs_run": len(history), "jobs": jobs}
    files.append(write_manifest(out, "reconstruct", config, files, extra))
    return files


def cmd_baseline(config: RunConfig, which: str) -> list:
    scene, picks = _scene_inputs(config)
    sp = config.split
    train, _ = block_split(scene.geometry, sp.axis, sp.buffer, sp.erode_all)
    bc = config.baseline
    out = _out_dir(config)
    files, extra = [], {}
    if which == "idw":
        bed = idw_interpolate(picks, scene.geometry, bc.idw_k, bc.idw_power)
    elif which == "kriging":
        # the variogram sees only train-core residuals; all picks condition the prediction
        tr = picks.in_mask(scene.geometry, train.mask)
        pts = empirical_variogram(tr.x, tr.y, pick_residuals(tr, scene.b_p), bc.n_bins,
                                  bc.max_lag, bc.max_variogram_points)
        model = fit_exponential_variogram(pts)
        bed, info = krige_residual(picks, scene.b_p, bc, model=model, return_info=True)
        vario = {"nugget": model.nugget, "sill": model.sill, "range": model.range,
                 "degenerate": model.degenerate, "fallback_cells": info["fallback_cells"],
                 "mode": bc.krige_mode,
                 "empirical": [{"lag": l, "gamma": g, "pairs": n} for l, g, n in pts]}
        log.info("variogram nugget=%.6g sill=%.6g range=%.6g", model.nugget, model.sill, model.range)
        path = os.path.join(out, "variogram.json")
        with open(path, "w") as fh:
            json.dump(vario, fh, indent=2, sort_keys=True)
            fh.write("\n")
        files.append(path)
        extra["variogram"] = {k: vario[k] for k in ("nugget", "sill", "range")}
    else:
        raise ParameterError(f"unknown baseline '{which}'")
    path = os.path.join(out, f"bed_{which}.asc")
    write_raster(path, bed)
    files.insert(0, path)
    files.append(write_manifest(out, f"baseline_{which}", config, files, extra))
    return files


def cmd_eval(config: RunConfig, pred_path, ref_path, picks_path=None, name: str = "report") -> list:
    pred = read_raster(pred_path)
    ref = read_raster(ref_path)
    if pred.geometry != ref.geometry:
        raise DimensionError("prediction and reference rasters are on different grids")
    sp = config.split
    _, test = block_split(ref.geometry, sp.axis, sp.buffer, sp.erode_all)
    core = test.mask & pred.valid_mask & ref.valid_mask
    picks = None
    d_rad = None
    if picks_path is None and config.paths.picks:
        picks_path = config.paths.picks
    if picks_path is not None:
        picks = read_picks(picks_path, ref.geometry)
        if picks.count:
            _, mask = splat_picks(picks, ref.geometry, config.observation.k,
                                  config.observation.radius_px)
            d_rad = distance_transform(mask).values
    report = evaluate(pred, ref, core, picks, d_rad)
    out = _out_dir(config)
    jpath = os.path.join(out, f"{name}.json")
    tpath = os.path.join(out, f"{name}.txt")
    with open(jpath, "w") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    with open(tpath, "w") as fh:
        fh.write(report.to_text())
    return [jpath, tpath]


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V",
                        help="override a config value, e.g. solver.lr=0.005 (repeatable)")
    common.add_argument("--out", help="output directory (default: config, then $PHYSBED_OUTPUT_DIR)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="physbed", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic scene")
    r = sub.add_parser("reconstruct", parents=[common], help="solve for the residual field")
    r.add_argument("--mode", choices=["whole-grid", "tiled"])
    r.add_argument("--tta", action="store_true", help="average over the 8 dihedral transforms")
    r.add_argument("--jobs", type=int, default=1, help="worker processes for tiles")
    b = sub.add_parser("baseline", parents=[common], help="IDW or kriging interpolation")
    b.add_argument("which", choices=["idw", "kriging"])
    e = sub.add_parser("eval", parents=[common], help="metrics on the test core")
    e.add_argument("--pred", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--picks")
    e.add_argument("--name", default="report")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.overrides)
        if args.out:
            overrides.append(f"paths.output_dir={json.dumps(args.out)}")
        if getattr(args, "mode", None):
            overrides.append(f"mode={json.dumps(args.mode)}")
        if getattr(args, "tta", False):
            overrides.append("tta=true")
        config = load_config(args.config, overrides)
        if args.command == "synth":
            files = cmd_synth(config)
        elif args.command == "reconstruct":
            if args.jobs < 1:
                raise ParameterError("--jobs must be >= 1")
            files = cmd_reconstruct(config, args.jobs)
        elif args.command == "baseline":
            files = cmd_baseline(config, args.which)
        else:
            files = cmd_eval(config, args.pred, args.ref, args.picks, args.name)
    except (PhysbedError, OSError, FloatingPointError) as exc:
        print(f"physbed {args.command}: error: {exc}", file=sys.stderr)
        return 1
    for f in files:
        print(f)
    return 0


if __name__ == "__main__":
    sys.exit(main())
