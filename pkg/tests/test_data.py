import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from physbed.data import (FEATURE_NAMES, NormStats, ObservationConfig, RadarPicks, Scene,
                          SynthParams, build_feature_stack, build_observations, confidence_map,
                          mass_residual_exact, residual_norm_stats, robust_stats, splat_picks,
                          synth_scene)
from physbed.errors import DimensionError, EmptyObservationsError, ParameterError
from physbed.grid import GridGeometry, RasterGrid, VectorField


def flat_scene(h=8, w=8, spacing=1.0, s=1000.0, b=100.0):
    geom = GridGeometry(h, w, spacing)

    def R(v):
        return RasterGrid.like(geom, np.full(geom.shape, float(v)))

    return Scene(R(s), VectorField(R(0), R(0)), R(0), R(0), R(b))


def test_scene_geometry_checked():
    sc = flat_scene()
    with pytest.raises(DimensionError):
        Scene(sc.s, sc.v, sc.smb, sc.dhdt, RasterGrid(np.zeros((8, 8)), 2.0))


def test_prior_thickness_is_derived():
    sc = flat_scene()
    assert np.all(sc.h_p.values == 900.0)
    sc2 = sc.replace(b_p=np.full((8, 8), 50.0))
    assert np.all(sc2.h_p.values == 950.0)


def test_crop_keeps_world_coordinates():
    sc = flat_scene(10, 10, 5.0)
    c = sc.crop(2, 3, 4, 5)
    assert c.geometry.origin == (15.0, 10.0) and c.geometry.shape == (4, 5)


# --- splatting --------------------------------------------------------------


def test_single_pick_at_center_k1():
    geom = GridGeometry(5, 5, 1.0)
    bed, mask = splat_picks(RadarPicks([2.5], [2.5], [42.0]), geom, k=1)
    assert mask.sum() == 1 and mask[2, 2]
    assert bed.values[2, 2] == 42.0
    assert np.isnan(bed.values[0, 0])


def test_splat_weighted_mean_matches_loop():
    rng = np.random.default_rng(0)
    geom = GridGeometry(9, 7, 2.0)
    picks = RadarPicks(rng.uniform(0, 14, 6), rng.uniform(0, 18, 6), rng.normal(size=6))
    bed, mask = splat_picks(picks, geom, k=4, radius_px=1.5)
    X, Y = geom.cell_centers()
    num = np.zeros(geom.shape)
    den = np.zeros(geom.shape)
    for x, y, b in zip(picks.x, picks.y, picks.bed):
        d = np.hypot(X - x, Y - y)
        near = np.argsort(d, axis=None, kind="stable")[:4]
        for f in near:
            i, j = divmod(f, geom.width)
            w = math.exp(-(d[i, j] / 3.0) ** 2)
            num[i, j] += w * b
            den[i, j] += w
    assert np.array_equal(mask, den > 0)
    assert np.allclose(bed.values[mask], num[mask] / den[mask], rtol=1e-12)


def test_splat_is_order_invariant():
    rng = np.random.default_rng(2)
    x, y, b = rng.uniform(0, 10, 30), rng.uniform(0, 10, 30), rng.normal(size=30)
    geom = GridGeometry(10, 10, 1.0)
    a, _ = splat_picks(RadarPicks(x, y, b), geom)
    p = rng.permutation(30)
    c, _ = splat_picks(RadarPicks(x[p], y[p], b[p]), geom)
    assert np.array_equal(a.values, c.values, equal_nan=True)


def test_splat_rejects_empty():
    with pytest.raises(EmptyObservationsError):
        splat_picks(RadarPicks([], [], []), GridGeometry(3, 3, 1.0))


def test_confidence_map_values():
    assert confidence_map(np.array([0.0]), 12.0)[0] == 1.0
    assert confidence_map(np.array([12.0]), 12.0)[0] == pytest.approx(math.exp(-1))
    with pytest.raises(ParameterError):
        confidence_map(np.zeros(2), 0.0)


def test_observations_thickness_against_surface():
    sc = flat_scene(6, 6)
    obs = build_observations(RadarPicks([2.5], [3.5], [120.0]), sc, ObservationConfig(k=1))
    assert obs.h_rad[3, 2] == 880.0
    assert obs.d_rad[3, 2] == 0 and obs.d_rad[3, 5] == 3
    assert obs.confidence[3, 2] == 1.0


def test_empty_observations_layer():
    obs = build_observations(RadarPicks([], [], []), flat_scene())
    assert obs.empty and np.all(obs.confidence == 0) and np.all(np.isinf(obs.d_rad))


def test_picks_outside_extent_counted():
    p = RadarPicks([0.5, 50.0, -1.0], [0.5, 0.5, 0.5], [1, 2, 3]).within(GridGeometry(4, 4, 1.0))
    assert p.count == 1 and p.n_dropped == 2


# --- normalization ----------------------------------------------------------


def test_robust_stats_median_and_mad():
    st_ = robust_stats([1.0, 2.0, 3.0, 4.0, 100.0])
    assert st_.mu_t == 3.0
    assert st_.sigma_t == pytest.approx(1.4826 * 1.0)


def test_sigma_floor():
    assert robust_stats(np.full(10, 7.0)).sigma_t == 1.0
    with pytest.raises(ParameterError):
        NormStats(0.0, 0.0)


def test_norm_stats_use_region_only():
    sc = flat_scene(6, 6)
    picks = RadarPicks([0.5, 1.5, 4.5], [0.5, 0.5, 0.5], [100.0, 90.0, -500.0])
    obs = build_observations(picks, sc, ObservationConfig(k=1))
    region = np.zeros((6, 6), bool)
    region[:, :3] = True
    ns = residual_norm_stats(obs, sc, region)
    # residual h_rad - h_p = b_p - bed: 0 and 10 on the west side; the far pick is ignored
    assert ns.mu_t == 5.0
    with pytest.raises(EmptyObservationsError):
        residual_norm_stats(obs, sc, np.zeros((6, 6), bool))


# --- features ---------------------------------------------------------------


def test_feature_stack_layout_and_scaling():
    case = synth_scene(1, 32, 32, 150.0, SynthParams(pick_pattern="none"))
    fs = build_feature_stack(case.scene, bands=3)
    assert fs.names[:8] == list(FEATURE_NAMES) and len(fs.channels) == 8 + 12
    s = fs.channels[0].values
    assert abs(s.mean()) < 1e-12 and s.std() == pytest.approx(1.0)
    vx, vy = fs.channels[1].values, fs.channels[2].values
    assert np.mean(vx ** 2 + vy ** 2) == pytest.approx(1.0)


def test_feature_stack_zero_spread_warns():
    with pytest.warns(UserWarning):
        build_feature_stack(flat_scene())


# --- synthetic scenes -------------------------------------------------------


def test_synth_is_deterministic():
    a = synth_scene(3, 40, 40)
    b = synth_scene(3, 40, 40)
    assert np.array_equal(a.scene.b_p.values, b.scene.b_p.values)
    assert np.array_equal(a.picks.x, b.picks.x)
    c = synth_scene(4, 40, 40)
    assert not np.array_equal(a.scene.b_p.values, c.scene.b_p.values)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_synth_truth_conserves_mass(seed):
    case = synth_scene(seed, 48, 40, 150.0)
    h = case.scene.s.values - case.truth_bed.values
    R = mass_residual_exact(case.scene, h)
    scale = np.abs(case.scene.smb.values).max()
    assert np.abs(R).max() < 1e-9 * max(scale, 1.0)
    assert h.min() >= 50.0


def test_synth_prior_bias_amplitude():
    case = synth_scene(0, 64, 64, params=SynthParams(bias_amplitude=30.0))
    bias = case.scene.b_p.values - case.truth_bed.values
    assert np.abs(bias).max() == pytest.approx(30.0)


def test_synth_picks_sample_truth():
    case = synth_scene(0, 64, 64, params=SynthParams(pick_pattern="lattice", lattice_step=4))
    geom = case.scene.geometry
    r, c = geom.cell_index(case.picks.x, case.picks.y)
    # lattice picks sit on cell centers, so they equal the truth raster there
    assert np.allclose(case.picks.bed, case.truth_bed.values[r, c], atol=1e-9)


def test_synth_thin_ice_rejected():
    with pytest.raises(ParameterError):
        synth_scene(0, 32, 32, params=SynthParams(bed_top=1800.0, bed_drop=0.0, n_troughs=0))
