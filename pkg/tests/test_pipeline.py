import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sardet.pipeline import (AugmentFlags, AugmentParams, Chip, NormSpec, SamplingError, apply_augment, augment,
                             chip_class_counts, crop_chip, encode_targets, eval_grid, gaussian_heatmap,
                             global_sigma, normalize, plan_mask, sample_train_chip, scale_intensity)
from sardet.synth import Scene, SynthConfig, generate_scene
from sardet.tensor import ConfigError


def scene_with(targets, size=128, valid=None, seed=0):
    rng = np.random.default_rng(seed)
    px = rng.integers(1, 4000, (size, size)).astype(np.uint16)
    vm = np.ones((size, size), bool) if valid is None else valid
    return Scene(px, list(targets), vm)


# -- normalisation ----------------------------------------------------------------------
def test_log_scaling_examples():
    assert abs(scale_intensity(np.array([65535]))[0] - 1.0) < 1e-3
    assert abs(np.log2(65535) / 16 - 1.0) < 1e-3
    assert scale_intensity(np.array([1]))[0] == 0.0
    assert scale_intensity(np.array([0]))[0] == 0.0  # clamped to 1 before the log


@pytest.mark.parametrize("mode", ["log", "linear", "arctan"])
def test_chip_mean_is_zero_after_centring(mode):
    raw = np.random.default_rng(1).integers(0, 65536, (64, 64)).astype(np.uint16)
    out = normalize(raw, mode, sigma_g=0.37)
    assert out.dtype == np.float32
    assert abs(float(out.astype(np.float64).mean())) < 1e-5


def test_centring_uses_valid_pixels_only():
    raw = np.random.default_rng(2).integers(100, 5000, (32, 32)).astype(np.uint16)
    vm = np.ones_like(raw, bool)
    vm[:8] = False
    out = normalize(raw, "log", valid_mask=vm)
    assert abs(float(out[vm].astype(np.float64).mean())) < 1e-5
    assert (out[~vm] == 0).all()


def test_normalisation_modes_and_errors():
    raw = np.array([[0, 1024, 65535]], dtype=np.uint16)
    np.testing.assert_allclose(scale_intensity(raw, "linear")[0], [0, 1024 / 65535, 1.0])
    np.testing.assert_allclose(scale_intensity(raw, "arctan")[0, 1], 0.5)
    with pytest.raises(ConfigError):
        normalize(raw, sigma_g=0.0)
    with pytest.raises(ConfigError):
        scale_intensity(raw, "sqrt")
    with pytest.raises(ConfigError):
        NormSpec(sigma_g=0.0)


@settings(max_examples=50, deadline=None)
@given(a=st.integers(0, 65535), b=st.integers(0, 65535))
def test_log_scaling_is_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    sa, sb = scale_intensity(np.array([lo, hi]))
    assert sa <= sb


def test_global_sigma_matches_pooled_std():
    scenes = [generate_scene(SynthConfig(size=64, target_count=(0, 1), distractor_count=(0, 0)), s) for s in range(3)]
    pooled = np.concatenate([scale_intensity(s.pixels[s.valid_mask]) for s in scenes])
    assert global_sigma(scenes) == pytest.approx(pooled.std(), rel=1e-9)
    spec = NormSpec.fit(scenes)
    np.testing.assert_array_equal(spec(scenes[0].pixels, scenes[0].valid_mask),
                                  normalize(scenes[0].pixels, "log", 16.0, spec.sigma_g, scenes[0].valid_mask))


# -- training chips ----------------------------------------------------------------------
def test_fg_chip_contains_a_target_within_jitter():
    sc = scene_with([(70, 50)])
    for s in range(30):
        chip = sample_train_chip(sc, "fg", 32, np.random.default_rng(s))
        assert chip.class_label == "fg" and chip.size == 32
        (x, y), = chip.targets
        assert abs(x - 16) <= 8 and abs(y - 16) <= 8


def test_bg_chip_has_no_target():
    sc = scene_with([(70, 50), (10, 100)])
    for s in range(30):
        chip = sample_train_chip(sc, "bg", 32, np.random.default_rng(s))
        assert chip.targets == [] and chip.class_label == "bg"
    free = scene_with([])
    assert sample_train_chip(free, "bg", 32, np.random.default_rng(0)).targets == []


def test_chip_never_exceeds_bounds():
    sc = scene_with([(1, 1), (126, 126)])
    for s in range(30):
        chip = sample_train_chip(sc, "fg", 32, np.random.default_rng(s))
        assert chip.raw.shape == (32, 32)
        x0, y0 = chip.origin[1]
        assert 0 <= x0 <= 96 and 0 <= y0 <= 96


def test_sampling_errors():
    vm = np.ones((64, 64), bool)
    vm[:20, :20] = False
    with pytest.raises(SamplingError):
        sample_train_chip(scene_with([(5, 5)], 64, vm), "fg", 32, np.random.default_rng(0))
    with pytest.raises(SamplingError):
        sample_train_chip(scene_with([(16, 16)], 32), "bg", 32, np.random.default_rng(0))
    with pytest.raises(SamplingError):
        sample_train_chip(scene_with([], 16), "bg", 32, np.random.default_rng(0))


def test_chip_class_counts():
    sc = scene_with([(5, 5), (6, 7), (100, 100)], 128)
    assert chip_class_counts([sc], 64) == (2, 2)


# -- evaluation grid ------------------------------------------------------------------------
@pytest.mark.parametrize("size,L,stride,crop", [(512, 64, 32, 32), (200, 64, 32, 48), (130, 64, 40, 40),
                                                (128, 64, 64, 64), (64, 64, 32, 32)])
def test_eval_grid_windows_partition_the_scene(size, L, stride, crop):
    sc = scene_with([], size)
    cover = np.zeros((size, size), int)
    for chip, win in eval_grid(sc, L, stride, crop):
        x0, y0 = chip.origin[1]
        # the owned window lies inside its chip
        assert x0 <= win.x0 and win.x1 <= x0 + L and y0 <= win.y0 and win.y1 <= y0 + L
        cover[win.y0:win.y1, win.x0:win.x1] += 1
    assert (cover == 1).all()


def test_eval_grid_special_cases():
    sc = scene_with([], 128)
    tiles = eval_grid(sc, 64, 64, 64)
    assert [(w.x0, w.y0, w.x1, w.y1) for _, w in tiles] == [(0, 0, 64, 64), (64, 0, 128, 64),
                                                          (0, 64, 64, 128), (64, 64, 128, 128)]
    one = eval_grid(scene_with([], 64), 64, 32, 32)
    assert len(one) == 1 and one[0][1] == type(one[0][1])(0, 0, 64, 64)
    with pytest.raises(ConfigError):
        eval_grid(sc, 64, 48, 32)
    with pytest.raises(SamplingError):
        eval_grid(scene_with([], 32), 64, 32, 32)


def test_eval_grid_interior_crops_are_central():
    chips = eval_grid(scene_with([], 512), 64, 32, 32)
    for chip, win in chips:
        x0, y0 = chip.origin[1]
        if 0 < x0 < 448 and 0 < y0 < 448:
            assert (win.x0 - x0, win.x1 - x0, win.y0 - y0, win.y1 - y0) == (16, 48, 16, 48)


# -- augmentation --------------------------------------------------------------------------
def make_chip(targets, L=16, seed=0):
    rng = np.random.default_rng(seed)
    raw = rng.integers(1, 60000, (L, L)).astype(np.uint16)
    vm = rng.random((L, L)) > 0.1
    raw[~vm] = 0
    return Chip(raw, vm, list(targets))


def test_hflip_examples():
    c = make_chip([(3, 5)])
    f = apply_augment(c, AugmentParams(hflip=True))
    assert f.targets == [(12, 5)]
    np.testing.assert_array_equal(f.raw, c.raw[:, ::-1])
    ff = apply_augment(f, AugmentParams(hflip=True))
    np.testing.assert_array_equal(ff.raw, c.raw)
    assert ff.targets == c.targets


def test_radiometric_identity():
    c = make_chip([(3, 5)])
    out = apply_augment(c, AugmentParams(gamma=1.0, brightness=0.0, contrast=1.0))
    np.testing.assert_array_equal(out.raw, c.raw)


@settings(max_examples=60, deadline=None)
@given(hf=st.booleans(), vf=st.booleans(), k=st.integers(0, 3), seed=st.integers(0, 1000))
def test_geometric_ops_keep_targets_on_their_pixels(hf, vf, k, seed):
    rng = np.random.default_rng(seed)
    pts = [tuple(int(v) for v in rng.integers(0, 16, 2)) for _ in range(3)]
    c = make_chip(pts, seed=seed)
    marker = np.zeros((16, 16), np.int64)
    for i, (x, y) in enumerate(pts):
        marker[y, x] = i + 1
    c.image = marker.astype(np.float32)
    out = apply_augment(c, AugmentParams(hflip=hf, vflip=vf, k90=k))
    assert len(out.targets) == len(pts) and out.class_label == c.class_label
    for i, (x, y) in enumerate(out.targets):
        assert out.image[y, x] != 0
    assert out.valid_mask.sum() == c.valid_mask.sum()
    assert sorted(out.raw.ravel()) == sorted(c.raw.ravel())


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_radiometric_ops_clamp_and_keep_geometry(seed):
    rng = np.random.default_rng(seed)
    c = make_chip([(4, 4)], seed=seed)
    flags = AugmentFlags(hflip=False, vflip=False, rot90=False, brightness=2.0, contrast=1.0, gamma=1.0)
    out = augment(c, rng, flags)
    assert out.raw.dtype == np.uint16
    assert out.targets == c.targets
    np.testing.assert_array_equal(out.valid_mask, c.valid_mask)
    assert (out.raw[~out.valid_mask] == 0).all()


def test_continuous_rotation_rounds_targets():
    c = make_chip([(8, 8)], L=17)
    out = apply_augment(c, AugmentParams(angle=30.0))
    assert out.targets == [(8, 8)]  # the centre is a fixed point


# -- target encoding ---------------------------------------------------------------------------
def test_gaussian_value_at_sigma():
    y = gaussian_heatmap((64, 64), [(30, 30)], 5.0)
    assert y[30, 30] == 1.0
    assert y[30, 35] == pytest.approx(np.exp(-0.5), rel=1e-6)
    assert y[30, 30 + 16] == 0.0  # beyond the 3-sigma truncation


def test_coincident_targets_equal_single_target():
    a = gaussian_heatmap((40, 40), [(10, 12)], 3.0)
    b = gaussian_heatmap((40, 40), [(10, 12), (10, 12)], 3.0)
    np.testing.assert_array_equal(a, b)


@settings(max_examples=50, deadline=None)
@given(x=st.integers(0, 31), y=st.integers(0, 31), sigma=st.floats(0.5, 12.0))
def test_encode_targets_properties(x, y, sigma):
    vm = np.ones((32, 32), bool)
    vm[:, :3] = False
    chip = Chip(np.ones((32, 32), np.uint16), vm, [(x, y)])
    tm = encode_targets(chip, sigma)
    assert tm.heatmap.min() >= 0.0 and tm.heatmap.max() <= 1.0
    assert tm.fg_pixel_count + tm.bg_pixel_count == vm.sum()
    assert (tm.heatmap[~vm] == 0).all()
    if vm[y, x]:
        assert tm.heatmap[y, x] == 1.0
        assert np.unravel_index(np.argmax(tm.heatmap), tm.heatmap.shape) == (y, x)


def test_encode_default_sigma_and_error():
    chip = Chip(np.ones((8, 8), np.uint16), np.ones((8, 8), bool), [(4, 4)])
    assert encode_targets(chip).heatmap[4, 4 + 3] == pytest.approx(np.exp(-9 / 200), rel=1e-6)
    with pytest.raises(ConfigError):
        gaussian_heatmap((8, 8), [(1, 1)], 0.0)


# -- MIM masking --------------------------------------------------------------------------------
@pytest.mark.parametrize("grid", [4, 6, 8, 16])
@pytest.mark.parametrize("block", [1, 2, 3, 4])
@pytest.mark.parametrize("ratio", [0.1, 0.5, 0.6, 0.95])
def test_mask_fraction_within_one_block(grid, block, ratio):
    for seed in range(5):
        plan = plan_mask(grid, block, ratio, np.random.default_rng(seed))
        assert plan.mask.shape == (grid, grid)
        assert ratio <= plan.fraction <= ratio + block * block / (grid * grid) + 1e-12


def test_mask_limit_and_pixel_expansion():
    plan = plan_mask(8, 2, 0.999, np.random.default_rng(0))
    assert plan.mask.all()
    pm = plan_mask(4, 2, 0.5, np.random.default_rng(1)).pixel_mask(4)
    assert pm.shape == (16, 16) and pm.mean() == 0.5
    with pytest.raises(ConfigError):
        plan_mask(8, 2, 1.0, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        plan_mask(8, 2, 0.0, np.random.default_rng(0))


def test_mask_is_made_of_aligned_blocks():
    plan = plan_mask(16, 4, 0.6, np.random.default_rng(3))
    blocks = plan.mask.reshape(4, 4, 4, 4).transpose(0, 2, 1, 3).reshape(16, 16)
    assert all(b.all() or not b.any() for b in blocks)


def test_crop_chip_translates_targets():
    sc = scene_with([(40, 50), (5, 5)])
    chip = crop_chip(sc, 32, 32, 32)
    assert chip.targets == [(8, 18)]
    np.testing.assert_array_equal(chip.raw, sc.pixels[32:64, 32:64])
