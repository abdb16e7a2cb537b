import itertools
import math

import numpy as np
import pytest

from stereorefine.matching import (
    CostVolume,
    NoiseSpec,
    SgmParams,
    census_cost,
    census_transform,
    coplanar_rig,
    degrade_truth,
    disparities_to_dem,
    epipolar_pair,
    fill_holes_median,
    lr_check,
    match_pair,
    match_scene,
    median_filter,
    sgm_aggregate,
    wta_subpixel,
    _sweep_horizontal,
)
from stereorefine.raster import GrayImage, HeightField, make_affine_camera
from stereorefine.scene import box_scene, make_acquisitions

ALPHA_14 = 0.25 / (2.0 * math.tan(math.radians(14.0)))  # m per px at +/-14 deg


def pm14_cams(sun=(0.0, 0.0, 1.0)):
    a = make_affine_camera(0.0, 14.0, 0.25, sun_direction=sun)
    b = make_affine_camera(0.0, -14.0, 0.25, sun_direction=sun)
    return a, b


# ---------------------------------------------------------------------------
# census cost
# ---------------------------------------------------------------------------


def census_oracle(vals, window, y, x):
    """Literal per-pixel census: bit per darker neighbor, edge-clamped."""
    h, w = vals.shape
    half = window // 2
    code = 0
    bit = 0
    for dy in range(-half, half + 1):
        for dx in range(-half, half + 1):
            if dy == 0 and dx == 0:
                continue
            yy = min(max(y + dy, 0), h - 1)
            xx = min(max(x + dx, 0), w - 1)
            if vals[yy, xx] < vals[y, x]:
                code |= 1 << bit
            bit += 1
    return code


def test_census_cost_zero_at_true_shift():
    rng = np.random.default_rng(0)
    base = rng.uniform(0, 1, size=(20, 40))
    left = GrayImage(base)
    right = GrayImage(np.roll(base, -3, axis=1))  # right pixel x sees left x+... left x matches right x-3
    cv = census_cost(left, right, (0, 6))
    k = 3 - cv.d_min
    interior = cv.costs[3:-3, 8:-8, k]
    assert interior.max() == 0


def test_constant_images_give_zero_costs():
    left = GrayImage(np.full((10, 12), 0.5))
    right = GrayImage(np.full((10, 12), 0.5))
    cv = census_cost(left, right, (0, 3))
    # all census codes are zero; every comparison inside the image is zero
    assert cv.costs[:, 3:, :].max() == 0


def test_census_cost_matches_bruteforce_oracle():
    rng = np.random.default_rng(1)
    lv = rng.uniform(0, 1, size=(8, 8))
    rv = rng.uniform(0, 1, size=(8, 8))
    cv = census_cost(GrayImage(lv), GrayImage(rv), (-2, 3))
    codes_l = np.array([[census_oracle(lv, 5, y, x) for x in range(8)] for y in range(8)])
    codes_r = np.array([[census_oracle(rv, 5, y, x) for x in range(8)] for y in range(8)])
    for y in range(8):
        for x in range(8):
            for k, d in enumerate(range(-2, 4)):
                xr = x - d
                if 0 <= xr < 8:
                    expected = bin(codes_l[y, x] ^ codes_r[y, xr]).count("1")
                else:
                    expected = 24
                assert cv.costs[y, x, k] == expected


def test_census_transform_matches_oracle_at_borders():
    rng = np.random.default_rng(2)
    vals = rng.uniform(0, 1, size=(6, 7))
    codes = census_transform(vals, 5)
    for y in (0, 1, 5):
        for x in (0, 3, 6):
            assert codes[y, x] == census_oracle(vals, 5, y, x)


def test_disparity_range_must_fit_image():
    img = GrayImage(np.zeros((4, 6)))
    with pytest.raises(ValueError):
        census_cost(img, img, (0, 6))


def test_sgm_params_validation():
    with pytest.raises(ValueError):
        SgmParams(p1=5.0, p2=5.0)
    with pytest.raises(ValueError):
        SgmParams(p1=0.0, p2=1.0)
    with pytest.raises(ValueError):
        SgmParams(path_count=6)
    with pytest.raises(ValueError):
        SgmParams(census_window=4)


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def test_zero_penalty_limit_equals_wta():
    # strictly positive costs: the 1e-9 penalties vanish below float32
    # resolution at every magnitude >= 1, so the recurrence collapses to the
    # raw cost bit for bit and argmin ties keep their order
    rng = np.random.default_rng(3)
    costs = rng.integers(1, 25, size=(15, 17, 9)).astype(np.uint8)
    cv = CostVolume(costs, 0, 8)
    params = SgmParams(p1=1e-9, p2=2e-9)
    agg = sgm_aggregate(cv, params)
    np.testing.assert_array_equal(agg.costs.argmin(axis=2), costs.argmin(axis=2))
    # the aggregate itself is path_count times the raw cost
    np.testing.assert_array_equal(agg.costs, 8.0 * costs.astype(np.float32))


HAND_COSTS = np.array(
    [[[2, 5, 6], [4, 1, 7], [5, 0, 3], [9, 4, 1], [6, 3, 2]]], dtype=np.uint8
)

# forward pass (p1=1, p2=3), worked position by position from the recurrence
HAND_L_FWD = np.array(
    [[[2, 5, 6], [4, 2, 10], [6, 0, 4], [10, 4, 2], [9, 4, 2]]], dtype=np.float32
)
# 4-path total: forward + backward + twice the raw cost (vertical paths have
# no predecessor in a one-row volume)
HAND_AGG_4PATH = np.array(
    [[[9, 20, 25], [17, 5, 32], [24, 1, 13], [39, 17, 5], [27, 13, 8]]], dtype=np.float32
)


def test_single_direction_matches_hand_table():
    out = np.zeros(HAND_COSTS.shape, dtype=np.float32)
    _sweep_horizontal(HAND_COSTS, np.float32(1.0), np.float32(3.0), +1, out)
    np.testing.assert_array_equal(out, HAND_L_FWD)


def test_aggregate_matches_hand_table():
    cv = CostVolume(HAND_COSTS, 0, 2)
    agg = sgm_aggregate(cv, SgmParams(p1=1.0, p2=3.0, path_count=4))
    np.testing.assert_array_equal(agg.costs, HAND_AGG_4PATH)


def test_forward_sweep_terminal_profile_matches_exhaustive_paths():
    # the per-position normalizer shifts all disparities equally, so cost
    # differences at the last position must match exhaustive enumeration
    rng = np.random.default_rng(4)
    costs = rng.integers(0, 20, size=(1, 6, 4)).astype(np.uint8)
    p1, p2 = 2.0, 7.0
    out = np.zeros(costs.shape, dtype=np.float32)
    _sweep_horizontal(costs, np.float32(p1), np.float32(p2), +1, out)

    n, dcount = 6, 4
    best = np.full(dcount, np.inf)
    for seq in itertools.product(range(dcount), repeat=n):
        total = float(costs[0, 0, seq[0]])
        for p in range(1, n):
            jump = abs(seq[p] - seq[p - 1])
            total += float(costs[0, p, seq[p]]) + (0.0 if jump == 0 else p1 if jump == 1 else p2)
        best[seq[-1]] = min(best[seq[-1]], total)
    got = out[0, -1] - out[0, -1].min()
    want = best - best.min()
    np.testing.assert_allclose(got, want, atol=1e-5)


def test_constant_disparity_volume_stays_constant():
    rng = np.random.default_rng(5)
    costs = rng.integers(5, 20, size=(9, 11, 6)).astype(np.uint8)
    costs[:, :, 2] = 0
    cv = CostVolume(costs, 0, 5)
    agg = sgm_aggregate(cv, SgmParams(p1=2.0, p2=9.0))
    assert (agg.costs.argmin(axis=2) == 2).all()


def test_aggregation_equivariant_under_lr_flip():
    rng = np.random.default_rng(6)
    costs = rng.integers(0, 24, size=(7, 9, 5)).astype(np.uint8)
    cv = CostVolume(costs, 0, 4)
    params = SgmParams(p1=1.5, p2=10.0)
    agg = sgm_aggregate(cv, params).costs
    flipped = CostVolume(costs[:, ::-1, ::-1].copy(), 0, 4)
    agg_f = sgm_aggregate(flipped, params).costs
    np.testing.assert_allclose(agg_f, agg[:, ::-1, ::-1], rtol=1e-5, atol=1e-4)


# ---------------------------------------------------------------------------
# subpixel WTA
# ---------------------------------------------------------------------------


def test_subpixel_symmetric_costs_zero_offset():
    costs = np.array([[[5.0, 1.0, 5.0]]], dtype=np.float32)
    d = wta_subpixel(CostVolume(costs, 0, 2))
    assert d[0, 0] == pytest.approx(1.0, abs=1e-12)


def test_subpixel_parabola_value():
    costs = np.array([[[4.0, 1.0, 2.0]]], dtype=np.float32)
    d = wta_subpixel(CostVolume(costs, 0, 2))
    # parabola vertex through (-1,4),(0,1),(1,2): offset 0.5*(4-2)/(4-2+2)
    assert d[0, 0] == pytest.approx(1.25, abs=1e-12)


def test_subpixel_tie_takes_smaller_disparity():
    # minima at d=0 and d=2; the tie rule anchors at the smaller one,
    # which sits on the range border and gets no offset
    costs = np.array([[[1.0, 5.0, 1.0, 9.0]]], dtype=np.float32)
    d = wta_subpixel(CostVolume(costs, 0, 3))
    assert d[0, 0] == 0.0


def test_subpixel_adjacent_tie_lands_between():
    # equal neighbors put the parabola vertex exactly halfway regardless
    # of which member anchors it
    costs = np.array([[[3.0, 1.0, 1.0, 5.0]]], dtype=np.float32)
    d = wta_subpixel(CostVolume(costs, 0, 3))
    assert d[0, 0] == pytest.approx(1.5, abs=1e-12)


def test_subpixel_clamped_and_border_zero():
    costs = np.array([[[0.0, 3.0, 9.0], [9.0, 3.0, 0.0]]], dtype=np.float32)
    d = wta_subpixel(CostVolume(costs, 0, 2))
    assert d[0, 0] == 0.0  # argmin at range border: no offset
    assert d[0, 1] == 2.0


# ---------------------------------------------------------------------------
# left-right check
# ---------------------------------------------------------------------------


def test_lr_check_consistent_constant():
    d_l = np.full((4, 20), 3.0)
    d_r = np.full((4, 20), -3.0)
    filled, valid = lr_check(d_l, d_r, 1.0)
    assert valid[:, 3:].all()
    np.testing.assert_array_equal(filled, d_l)


def test_lr_check_infinite_threshold_is_identity():
    rng = np.random.default_rng(7)
    d_l = rng.uniform(-5, 5, size=(6, 9))
    d_r = rng.uniform(-5, 5, size=(6, 9))
    filled, valid = lr_check(d_l, d_r, math.inf)
    assert valid.all()
    np.testing.assert_array_equal(filled, d_l)


def test_lr_check_fill_nearest_tie_left():
    d_l = np.array([[0.0, 0.0, 9.0, 9.0, 9.0, 3.0, 3.0, 3.0, 3.0]])
    d_r = np.array([[0.0, 0.0, -3.0, -3.0, -3.0, -3.0, 0.0, 0.0, 0.0]])
    # columns 2..4 look 9 px to the left of the image: invalid
    filled, valid = lr_check(d_l, d_r, 1.0)
    assert list(valid[0]) == [True, True, False, False, False, True, True, True, True]
    assert filled[0, 2] == 0.0
    assert filled[0, 3] == 0.0  # equidistant between columns 1 and 5: left wins
    assert filled[0, 4] == 3.0


def test_lr_check_empty_row_uses_global_median():
    d_l = np.array([[4.0] * 6, [50.0] * 6])
    d_r = np.full((2, 6), -4.0)
    # row 0 is consistent where in bounds; row 1 looks far out of bounds
    filled, valid = lr_check(d_l, d_r, 0.5)
    assert valid[0, 4:].all()
    assert not valid[1].any()
    assert (filled[1] == 4.0).all()


# ---------------------------------------------------------------------------
# epipolar pairs
# ---------------------------------------------------------------------------


def test_identical_cameras_zero_disparity():
    scene = box_scene(noise_amplitude=0.15, seed=2)
    cam = make_affine_camera(0.0, 14.0, 0.25)
    img_a, img_b, geom = epipolar_pair(scene, cam, cam)
    np.testing.assert_array_equal(img_a.values, img_b.values)
    assert math.isinf(geom.alpha)


def test_non_coplanar_pair_rejected():
    scene = box_scene()
    a = make_affine_camera(0.0, 14.0, 0.25)
    b = make_affine_camera(90.0, 14.0, 0.25)
    with pytest.raises(ValueError):
        epipolar_pair(scene, a, b)


def test_flat_scene_constant_disparity():
    h = 8.0 * ALPHA_14  # exactly 8 px of disparity
    scene = box_scene(
        extent_m=32.0, box_size=(10.0, 8.0), box_height=0.0, base_height=h,
        noise_amplitude=0.15, seed=3,
    )
    cam_a, cam_b = pm14_cams()
    img_a, img_b, geom = epipolar_pair(scene, cam_a, cam_b)
    assert geom.alpha == pytest.approx(ALPHA_14, rel=1e-12)
    expected = 2.0 * h * math.tan(math.radians(14.0)) / 0.25
    assert expected == pytest.approx(8.0, abs=1e-12)
    d, valid = match_pair(img_a, img_b, (0, 16), SgmParams())
    inner = np.zeros(d.shape, dtype=bool)
    inner[10:-10, 14:-14] = True
    inner &= img_a.validity_mask & img_b.validity_mask & valid
    err = np.abs(d[inner] - expected)
    assert (err <= 0.25).mean() >= 0.99


def test_box_roof_disparity_offset():
    scene = box_scene(extent_m=32.0, box_size=(10.0, 8.0), box_height=6.0, noise_amplitude=0.15, seed=4)
    cam_a, cam_b = pm14_cams()
    img_a, img_b, geom = epipolar_pair(scene, cam_a, cam_b)
    d, valid = match_pair(img_a, img_b, (-4, 18), SgmParams())
    expected_jump = 2.0 * 6.0 * math.tan(math.radians(14.0)) / 0.25  # about 12.0 px
    # sample the roof center and a ground patch through the left camera frame
    uv_roof = geom.cam_left.project(np.array([16.0, 16.0, 6.0]))
    uv_ground = geom.cam_left.project(np.array([26.0, 26.0, 0.0]))
    ur, vr = int(round(uv_roof[0])), int(round(uv_roof[1]))
    ug, vg = int(round(uv_ground[0])), int(round(uv_ground[1]))
    roof_d = np.median(d[vr - 2 : vr + 3, ur - 2 : ur + 3])
    ground_d = np.median(d[vg - 2 : vg + 3, ug - 2 : ug + 3])
    assert roof_d - ground_d == pytest.approx(expected_jump, abs=0.5)


def test_lr_invalidates_occlusion_band():
    scene = box_scene(extent_m=32.0, box_size=(10.0, 8.0), box_height=6.0, noise_amplitude=0.15, seed=4)
    cam_a, cam_b = pm14_cams()
    img_a, img_b, geom = epipolar_pair(scene, cam_a, cam_b)
    d, valid = match_pair(img_a, img_b, (-4, 18), SgmParams())
    uv = geom.cam_left.project(np.array([16.0, 16.0, 6.0]))
    row = int(round(uv[1]))
    strip = ~valid[row, 10:-10]
    runs = np.diff(np.flatnonzero(np.diff(np.r_[0, strip.view(np.int8), 0])))
    longest = int(runs.max()) if runs.size else 0
    assert 3 <= longest <= 20


def test_coplanar_rig_preserves_relative_parallax():
    cams = make_acquisitions(6, seed=11)
    a, b = cams[0], cams[3]
    rig_a, rig_b = coplanar_rig(a, b, 0.25)

    def hray(c):
        r = c.ray_direction()
        return r[:2] / -r[2]

    rel_before = hray(a) - hray(b)
    rel_after = hray(rig_a) - hray(rig_b)
    assert np.hypot(*rel_before) == pytest.approx(np.hypot(*rel_after), rel=1e-9)
    # rig rays are coplanar: cross of horizontal components vanishes
    ha, hb = hray(rig_a), hray(rig_b)
    assert abs(ha[0] * hb[1] - ha[1] * hb[0]) <= 1e-12


def test_coplanar_rig_rejects_parallel_rays():
    cam = make_affine_camera(25.0, 10.0, 0.25)
    with pytest.raises(ValueError):
        coplanar_rig(cam, cam, 0.25)


# ---------------------------------------------------------------------------
# disparity to DEM and end-to-end matcher
# ---------------------------------------------------------------------------


def test_flat_scene_dem_within_half_alpha():
    h = 8.0 * ALPHA_14
    scene = box_scene(
        extent_m=32.0, box_height=0.0, base_height=h, noise_amplitude=0.15, seed=5
    )
    cam_a, cam_b = pm14_cams()
    dem = match_scene(scene, cam_a, cam_b)
    inner = dem.values[6:-6, 6:-6]
    assert np.abs(inner - h).max() <= 0.5 * ALPHA_14 + 1e-6


def test_box_scene_dem_recovers_roof_and_ground():
    scene = box_scene(extent_m=32.0, box_size=(10.0, 8.0), box_height=6.0, noise_amplitude=0.15, seed=6)
    cam_a, cam_b = pm14_cams()
    dem = match_scene(scene, cam_a, cam_b)
    from scipy import ndimage

    roof_core = ndimage.binary_erosion(scene.building_mask, iterations=4)
    ground = ~ndimage.binary_dilation(scene.building_mask, iterations=12)
    ground[:6] = ground[-6:] = False
    ground[:, :6] = ground[:, -6:] = False
    assert np.abs(dem.values[roof_core] - 6.0).max() <= 2.0 * ALPHA_14
    assert np.abs(dem.values[ground] - 0.0).max() <= 2.0 * ALPHA_14


def test_constant_disparity_to_constant_dem():
    grid = HeightField(np.zeros((20, 20)), 0.0, 0.0, 0.25)
    cam = make_affine_camera(0.0, 14.0, 0.25, b=(10.0, 10.0))
    from stereorefine.matching import EpipolarGeometry

    geom = EpipolarGeometry(alpha=0.5, beta=0.0, cam_left=cam, cam_right=cam)
    d = np.full((40, 40), 4.0)
    dem = disparities_to_dem(d, geom, grid)
    assert not dem.nodata_mask.any()
    np.testing.assert_allclose(dem.values, 2.0, atol=1e-9)


def test_fill_holes_median():
    vals = np.full((8, 8), 3.0)
    vals[4, 4] = np.nan
    filled = fill_holes_median(vals)
    assert filled[4, 4] == 3.0


# ---------------------------------------------------------------------------
# median filter
# ---------------------------------------------------------------------------


def test_median_filter_constant_unchanged():
    dem = HeightField(np.full((12, 12), 7.0))
    out = median_filter(dem)
    np.testing.assert_array_equal(out.values, dem.values)


def test_median_filter_removes_spike():
    vals = np.zeros((9, 9))
    vals[4, 4] = 50.0
    out = median_filter(HeightField(vals))
    assert out.values[4, 4] == 0.0


def median_oracle(vals, mask, kernel, y, x):
    half = kernel // 2
    h, w = vals.shape
    window = []
    for dy in range(-half, half + 1):
        for dx in range(-half, half + 1):
            yy = min(max(y + dy, 0), h - 1)
            xx = min(max(x + dx, 0), w - 1)
            if not mask[yy, xx]:
                window.append(vals[yy, xx])
    if not window:
        return None
    window.sort()
    n = len(window)
    mid = n // 2
    return window[mid] if n % 2 else 0.5 * (window[mid - 1] + window[mid])


def test_median_filter_matches_bruteforce_oracle():
    rng = np.random.default_rng(8)
    vals = rng.uniform(-10, 10, size=(16, 16))
    mask = rng.uniform(size=(16, 16)) < 0.15
    dem = HeightField(vals, nodata_mask=mask)
    out = median_filter(dem, kernel=5)
    for y in range(16):
        for x in range(16):
            want = median_oracle(vals, mask, 5, y, x)
            if want is None:
                assert out.nodata_mask[y, x]
            else:
                assert out.values[y, x] == pytest.approx(want, abs=1e-12)


def test_median_filter_idempotent_on_stripes():
    vals = np.zeros((20, 24))
    vals[:, 8:16] = 5.0
    vals[:, 16:] = -3.0
    once = median_filter(HeightField(vals))
    twice = median_filter(once)
    np.testing.assert_array_equal(once.values, twice.values)


# ---------------------------------------------------------------------------
# truth degradation
# ---------------------------------------------------------------------------


def test_degrade_zero_amplitude_identity():
    rng = np.random.default_rng(9)
    dem = HeightField(rng.uniform(0, 20, size=(16, 16)))
    spec = NoiseSpec(edge_sigma_cells=0.0, speckle_sigma_m=0.0, blob_count=0)
    out = degrade_truth(dem, spec, seed=1)
    assert out.values.tobytes() == dem.values.tobytes()


def test_degrade_deterministic():
    dem = HeightField(np.zeros((32, 32)))
    spec = NoiseSpec(speckle_sigma_m=1.0, blob_count=3)
    a = degrade_truth(dem, spec, seed=5)
    b = degrade_truth(dem, spec, seed=5)
    assert a.values.tobytes() == b.values.tobytes()
    c = degrade_truth(dem, spec, seed=6)
    assert a.values.tobytes() != c.values.tobytes()


def test_speckle_mae_matches_folded_normal_mean():
    dem = HeightField(np.zeros((320, 320)))
    spec = NoiseSpec(edge_sigma_cells=0.0, speckle_sigma_m=1.0, blob_count=0)
    out = degrade_truth(dem, spec, seed=10)
    mae = np.abs(out.values - dem.values).mean()
    assert 0.7 <= mae <= 0.9

