import csv
import itertools
import math

import numpy as np
import pytest
import torch

from stereorefine.matching import NoiseSpec, degrade_truth
from stereorefine.network import l1_loss, load_checkpoint
from stereorefine.raster import make_affine_camera
from stereorefine.scene import box_scene, frame_camera, render_view
from stereorefine.training import (
    PAPER_BATCH_SIZE,
    PAPER_LR,
    LogRow,
    PatchSample,
    PatchSampler,
    StripeSplit,
    TrainConfig,
    TrainingDiverged,
    apply_dihedral,
    augment,
    evaluate_patches,
    make_training_data,
    sample_patch,
    select_stereo_pair,
    train,
    train_generalized,
    training_stats,
    write_run_log,
)
from stereorefine.warping import Variant, ortho_rectify

TINY_WIDTHS = (8, 16)


def tiny_config(**kw):
    base = dict(
        variant=Variant.ZERO,
        levels=2,
        channel_widths=TINY_WIDTHS,
        lr=2e-3,
        batch_size=4,
        max_steps=150,
        eval_every=25,
        seed=0,
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def box_data():
    scene = box_scene(extent_m=32.0, box_height=6.0, noise_amplitude=0.3, seed=3)
    initial = degrade_truth(
        scene.target_dem, NoiseSpec(edge_sigma_cells=2.0, speckle_sigma_m=1.0), seed=5
    )
    return scene, make_training_data(initial, scene.target_dem)


def ortho_pair(scene, dem, azimuth):
    pair = []
    for az in (azimuth, azimuth + 180.0):
        cam = frame_camera(make_affine_camera(az, 14.0, dem.cell_size), scene)
        pair.append(ortho_rectify(render_view(scene, cam), cam, dem))
    return tuple(pair)


@pytest.fixture(scope="module")
def stereo_data(box_data):
    scene, zero_data = box_data
    initial = zero_data.initial
    held_out = ortho_pair(scene, initial, 45.0)
    pool = [ortho_pair(scene, initial, 0.0), ortho_pair(scene, initial, 90.0)]
    return make_training_data(initial, scene.target_dem, held_out), pool


@pytest.fixture(scope="module")
def zero_result(box_data):
    _, data = box_data
    return train(tiny_config(), data)


# ---------------------------------------------------------------------------
# configuration and stripe split
# ---------------------------------------------------------------------------


def test_config_defaults_and_published_values():
    cfg = TrainConfig()
    assert cfg.lr == 1e-4 and cfg.batch_size == 8 and cfg.weight_decay == 1e-5
    assert (PAPER_LR, PAPER_BATCH_SIZE) == (1e-5, 20)
    # default patches are 128 px, i.e. 32 m at 0.25 m cells
    assert cfg.patch_size == 128
    assert cfg.patch_size * 0.25 == 32.0
    net = cfg.network_config()
    assert net.channel_widths == (64, 128, 256, 512, 512)
    assert net.in_channels == 3 and net.residual


@pytest.mark.parametrize(
    "kw",
    [
        {"lr": 0.0},
        {"lr": -1e-4},
        {"batch_size": 0},
        {"max_steps": 0},
        {"eval_every": 0},
        {"weight_decay": -1.0},
        {"val_patch_cap": 0},
    ],
)
def test_config_rejects_bad_values(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


@pytest.mark.parametrize("width", [5, 128, 2048, 1031])
def test_stripe_split_disjoint_and_exhaustive(width):
    split = StripeSplit(width)
    roles = ["train", "val", "test"]
    sets = {r: set(split.columns(r).tolist()) for r in roles}
    for a, b in itertools.combinations(roles, 2):
        assert not sets[a] & sets[b]
    assert set().union(*sets.values()) == set(range(width))
    assert len(split.role_bounds("train")) == 3


def test_stripe_split_rejects_narrow_raster():
    with pytest.raises(ValueError):
        StripeSplit(4)
    with pytest.raises(ValueError):
        StripeSplit(128).columns("holdout")


def test_training_stats_ignore_val_and_test_stripes(box_data):
    _, data = box_data
    vals = data.initial.values.copy()
    lo = data.split.bounds(3)[0]
    vals[:, lo:] += 1000.0
    spiked = data.initial.copy()
    spiked.values[:, :] = vals
    stats = training_stats(spiked, data.split)
    train_cols = data.initial.values[:, : data.split.bounds(2)[1]]
    assert stats.mean_height == pytest.approx(train_cols.mean(), rel=1e-12)
    assert stats.std_height == pytest.approx(train_cols.std(), rel=1e-12)


def test_training_data_rejects_mismatched_rasters(box_data):
    scene, data = box_data
    shrunk = scene.target_dem.copy()
    shrunk.values = shrunk.values[:-2]
    shrunk.nodata_mask = shrunk.nodata_mask[:-2]
    with pytest.raises(ValueError):
        make_training_data(data.initial, shrunk)


# ---------------------------------------------------------------------------
# stereo-pair selection
# ---------------------------------------------------------------------------


def bruteforce_pair(cams):
    best, best_gap = None, math.inf
    for i, j in itertools.combinations(range(len(cams)), 2):
        a, b = cams[i], cams[j]
        if abs(a.off_nadir_deg) > 40.0 or abs(b.off_nadir_deg) > 40.0:
            continue
        ra, rb = a.ray_direction(), b.ray_direction()
        cosang = np.dot(ra, rb) / (np.linalg.norm(ra) * np.linalg.norm(rb))
        angle = math.degrees(math.acos(np.clip(cosang, -1.0, 1.0)))
        if not 10.0 <= angle <= 28.0:
            continue
        m = abs(a.timestamp_days - b.timestamp_days) % 180.0
        gap = min(m, 180.0 - m)
        if gap < best_gap:
            best, best_gap = (i, j), gap
    return best


def cam(azimuth, off_nadir, day):
    return make_affine_camera(azimuth, off_nadir, 0.25, timestamp_days=day)


def test_select_pair_single_candidate():
    cams = [cam(0.0, 10.0, 0.0), cam(180.0, 5.0, 3.0)]
    assert select_stereo_pair(cams) == (0, 1)


def test_select_pair_rejects_out_of_window_geometry():
    with pytest.raises(ValueError, match="no admissible"):
        select_stereo_pair([cam(0.0, 2.0, 0.0), cam(180.0, 3.0, 1.0)])
    with pytest.raises(ValueError, match="no admissible"):
        select_stereo_pair([cam(0.0, 45.0, 0.0), cam(0.0, 25.0, 1.0)])
    with pytest.raises(ValueError):
        select_stereo_pair([cam(0.0, 10.0, 0.0)])


def test_select_pair_time_gap_wraps_at_half_year():
    cams = [cam(0.0, 12.0, 0.0), cam(180.0, 8.0, 179.0), cam(90.0, 12.0, 50.0)]
    # raw gap 179 d folds to 1 d, beating the 50 d pair
    assert select_stereo_pair(cams) == (0, 1)


def test_select_pair_tie_breaks_lexicographically():
    cams = [
        cam(0.0, 12.0, 0.0),
        cam(180.0, 8.0, 10.0),
        cam(90.0, 12.0, 100.0),
        cam(270.0, 8.0, 110.0),
    ]
    assert bruteforce_pair(cams) in ((0, 1), (2, 3))
    assert select_stereo_pair(cams) == (0, 1)


def test_select_pair_matches_bruteforce_constellations():
    from stereorefine.scene import make_acquisitions

    checked = 0
    for seed in range(8):
        cams = make_acquisitions(6, seed=seed)
        expect = bruteforce_pair(cams)
        if expect is None:
            with pytest.raises(ValueError):
                select_stereo_pair(cams)
        else:
            assert select_stereo_pair(cams) == expect
            checked += 1
    assert checked >= 4


# ---------------------------------------------------------------------------
# patch sampling and augmentation
# ---------------------------------------------------------------------------


def test_sample_patch_stays_inside_single_train_stripe(box_data):
    _, data = box_data
    sampler = PatchSampler(data, Variant.ZERO, 16)
    rng = np.random.default_rng(1)
    stripes = data.split.role_bounds("train")
    for _ in range(300):
        s = sample_patch(sampler, rng)
        assert any(lo <= s.col0 and s.col0 + 16 <= hi for lo, hi in stripes)
        assert 0 <= s.row0 <= data.initial.height - 16
        assert s.stack.shape == (1, 16, 16) and s.stack.dtype == np.float32


def test_sample_patch_deterministic_and_consistent(box_data):
    _, data = box_data
    sampler = PatchSampler(data, Variant.ZERO, 16)
    seq_a = [sample_patch(sampler, np.random.default_rng(7)) for _ in range(1)]
    draws = [(s.row0, s.col0) for s in seq_a]
    rng = np.random.default_rng(7)
    for row0, col0 in draws:
        s = sampler.sample(rng)
        assert (s.row0, s.col0) == (row0, col0)
        window = (slice(s.row0, s.row0 + 16), slice(s.col0, s.col0 + 16))
        stats = data.stats
        expect = ((data.initial.values - stats.mean_height) / stats.std_height)[window]
        np.testing.assert_array_equal(s.stack[0], expect.astype(np.float32))
        expect_t = ((data.target.values - stats.mean_height) / stats.std_height)[window]
        np.testing.assert_array_equal(s.target, expect_t.astype(np.float32))


def probe_sample():
    stack = np.arange(3 * 64, dtype=np.float32).reshape(3, 8, 8)
    target = np.arange(64, dtype=np.float32).reshape(8, 8) * 2.0
    valid = np.zeros((8, 8), dtype=bool)
    valid[:5, :3] = True
    return PatchSample(stack=stack, target=target, valid=valid, row0=4, col0=9, pair_index=2)


def dihedral_elements():
    return [(k, flip) for k in range(4) for flip in (False, True)]


def test_augment_uniform_over_eight_elements():
    rng = np.random.default_rng(0)
    base = probe_sample()
    counts = {e: 0 for e in dihedral_elements()}
    n = 10_000
    for _ in range(n):
        out = augment(base, rng)
        matches = [
            e
            for e in dihedral_elements()
            if np.array_equal(out.target, apply_dihedral(base.target, *e))
        ]
        assert len(matches) == 1
        counts[matches[0]] += 1
    sigma = math.sqrt(n * (1 / 8) * (7 / 8))
    for e, c in counts.items():
        assert abs(c - n / 8) <= 3 * sigma, (e, c)


def test_augment_moves_all_channels_and_target_together():
    base = probe_sample()
    out = augment(base, np.random.default_rng(3))
    (element,) = [
        e
        for e in dihedral_elements()
        if np.array_equal(out.target, apply_dihedral(base.target, *e))
    ]
    np.testing.assert_array_equal(out.stack, apply_dihedral(base.stack, *element))
    np.testing.assert_array_equal(out.valid, apply_dihedral(base.valid, *element))
    assert (out.row0, out.col0, out.pair_index) == (4, 9, 2)


def test_augment_toggles_restrict_the_group():
    base = probe_sample()
    rng = np.random.default_rng(11)
    for _ in range(50):
        out = augment(base, rng, rotations=False, flips=False)
        np.testing.assert_array_equal(out.target, base.target)
        out = augment(base, rng, rotations=False, flips=True)
        assert any(
            np.array_equal(out.target, apply_dihedral(base.target, 0, f)) for f in (False, True)
        )


def test_rotations_and_flips_are_involutions():
    arr = np.random.default_rng(5).normal(size=(4, 8, 8))
    np.testing.assert_array_equal(apply_dihedral(apply_dihedral(arr, 2, False), 2, False), arr)
    np.testing.assert_array_equal(apply_dihedral(apply_dihedral(arr, 0, True), 0, True), arr)


def test_loss_invariant_under_joint_dihedral_transform():
    rng = np.random.default_rng(9)
    pred = rng.normal(size=(1, 1, 16, 16))
    target = rng.normal(size=(1, 1, 16, 16))
    mask = rng.random((1, 1, 16, 16)) > 0.3
    ref = l1_loss(torch.from_numpy(pred), torch.from_numpy(target), torch.from_numpy(mask))
    for e in dihedral_elements():
        val = l1_loss(
            torch.from_numpy(apply_dihedral(pred, *e)),
            torch.from_numpy(apply_dihedral(target, *e)),
            torch.from_numpy(apply_dihedral(mask, *e)),
        )
        assert abs(float(val) - float(ref)) < 1e-12


# ---------------------------------------------------------------------------
# training runs
# ---------------------------------------------------------------------------


def test_training_reduces_validation_error(box_data, zero_result):
    _, data = box_data
    direct = np.abs(data.initial.values - data.target.values)
    sampler = PatchSampler(data, Variant.ZERO, 16)
    cells = [direct[s.row0 : s.row0 + 16, s.col0 : s.col0 + 16] for s in sampler.val_patches(12)]
    initial_mae = float(np.mean(np.concatenate([c.ravel() for c in cells])))
    assert zero_result.initial_val_mae == pytest.approx(initial_mae, rel=1e-4)
    assert zero_result.best_val_mae < zero_result.initial_val_mae
    evals = [r.val_mae for r in zero_result.log if r.val_mae is not None]
    assert zero_result.best_val_mae == min(evals)


def test_residual_network_starts_at_input_dem_error(zero_result):
    # zero-initialized head makes the first evaluation the input DEM's error
    assert zero_result.log[0].step == 0
    assert zero_result.log[0].val_mae == zero_result.initial_val_mae
    assert zero_result.best_step >= 1


def test_loss_curves_converge_for_different_seeds(box_data):
    _, data = box_data
    losses = []
    for seed in (0, 1):
        result = train(tiny_config(seed=seed), data)
        curve = [r.train_loss for r in result.log if r.train_loss is not None]
        assert np.mean(curve[-10:]) <= 0.5 * curve[0]
        losses.append(curve)
    assert losses[0] != losses[1]


def test_divergence_aborts_with_diagnostic(box_data):
    _, data = box_data
    with pytest.raises(TrainingDiverged, match="step"):
        train(tiny_config(lr=1e38, max_steps=10, batch_size=2), data)


def test_fixed_seed_runs_are_bit_identical(box_data, tmp_path):
    _, data = box_data
    cfg = tiny_config(
        max_steps=20, augment_rotations=False, augment_flips=False, eval_every=10
    )
    paths = []
    for name in ("a.ckpt", "b.ckpt"):
        result = train(cfg, data)
        result.save(tmp_path / name)
        paths.append(tmp_path / name)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_best_state_reproduces_best_val_mae(box_data, zero_result):
    _, data = box_data
    model = zero_result.build_model()
    samples = PatchSampler(data, Variant.ZERO, 16).val_patches(12)
    mae = evaluate_patches(model, samples, data.stats)
    assert mae == pytest.approx(zero_result.best_val_mae, abs=1e-9)


def test_checkpoint_round_trip_preserves_result(box_data, zero_result, tmp_path):
    path = tmp_path / "zero.ckpt"
    zero_result.save(path, extra={"note": "unit"})
    ckpt = load_checkpoint(path)
    assert ckpt.variant is Variant.ZERO
    assert ckpt.config == zero_result.net_config
    assert ckpt.extra["best_val_mae"] == pytest.approx(zero_result.best_val_mae, rel=1e-6)
    assert ckpt.extra["note"] == "unit"
    for key, tensor in zero_result.state.items():
        assert torch.equal(ckpt.state[key].to(tensor.dtype), tensor), key


def test_run_log_csv_layout(zero_result, tmp_path):
    path = tmp_path / "run.csv"
    write_run_log(path, zero_result.log)
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["step", "train_loss", "val_mae"]
    assert len(rows) == len(zero_result.log) + 1
    assert rows[1][1] == "" and float(rows[1][2]) == zero_result.initial_val_mae
    steps = [int(r[0]) for r in rows[1:]]
    assert steps == list(range(len(steps)))
    assert all(r[2] == "" for r in rows[2:] if int(r[0]) % 25 != 0)


def test_write_log_row_blanks():
    row = LogRow(3, None, None)
    assert row.train_loss is None and row.val_mae is None


# ---------------------------------------------------------------------------
# generalized training over a pair pool
# ---------------------------------------------------------------------------


def test_pool_of_one_matches_plain_training(stereo_data):
    data, _ = stereo_data
    cfg = tiny_config(variant=Variant.STEREO, max_steps=15, eval_every=5)
    plain = train(cfg, data)
    pooled = train_generalized(cfg, data, [data.images])
    assert plain.state.keys() == pooled.state.keys()
    for key in plain.state:
        assert torch.equal(plain.state[key], pooled.state[key]), key
    assert plain.best_val_mae == pooled.best_val_mae


def test_pool_draws_are_roughly_uniform(stereo_data):
    data, pool = stereo_data
    sampler = PatchSampler(data, Variant.STEREO, 16, pool + [data.images])
    rng, pair_rng = np.random.default_rng(2), np.random.default_rng(3)
    counts = np.zeros(3, dtype=int)
    for _ in range(1000):
        counts[sampler.sample(rng, pair_rng).pair_index] += 1
    assert (counts >= 200).all(), counts


def test_generalized_training_validates_on_held_out_pair(stereo_data):
    data, pool = stereo_data
    cfg = tiny_config(variant=Variant.STEREO, max_steps=120, eval_every=20, seed=2)
    result = train_generalized(cfg, data, pool)
    assert math.isfinite(result.best_val_mae)
    assert result.best_val_mae < result.initial_val_mae


def test_pool_entries_must_cover_the_variant(stereo_data):
    data, pool = stereo_data
    cfg = tiny_config(variant=Variant.STEREO, max_steps=1)
    with pytest.raises(ValueError, match="too few images"):
        train_generalized(cfg, data, [pool[0][:1]])
