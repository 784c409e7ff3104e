import numpy as np
import pytest

from lesionseg.core import Mask, MultiModalCase, Volume, foreground_mask
from lesionseg.sampling import (
    AUGMENTATIONS,
    HEALTHY,
    LESION,
    PatchSpec,
    SamplerConfig,
    SamplingError,
    augment_patch,
    build_patch_set,
    case_rng,
    extract_patch,
    load_patch_set,
    sample_centers,
    save_patch_set,
    window_bounds,
    window_in_bounds,
)

CFG = SamplerConfig(goal_per_case=200, seed=11)


def test_class_split_and_counts(small_cases):
    for case in small_cases:
        specs = sample_centers(case, CFG, case_rng(CFG.seed, case.case_id))
        labels = [s.class_label for s in specs]
        assert labels.count(HEALTHY) == labels.count(LESION) == 100


def test_odd_goal_rounding(small_cases):
    specs = sample_centers(small_cases[0], SamplerConfig(goal_per_case=7), np.random.default_rng(0))
    assert len(specs) == 7


def test_lesion_offset_containment(small_cases):
    for case in small_cases:
        specs = sample_centers(case, CFG, case_rng(CFG.seed, case.case_id))
        for s in specs:
            if s.class_label != LESION:
                continue
            lo, hi = window_bounds(s.center, CFG.patch_size)
            assert np.all(lo <= s.source_voxel) and np.all(np.asarray(s.source_voxel) < hi)
            assert case.gold.data[s.source_voxel]


def test_healthy_centres_in_foreground_outside_lesion(small_cases):
    for case in small_cases:
        fg = foreground_mask(case).data
        for s in sample_centers(case, CFG, case_rng(CFG.seed, case.case_id)):
            assert window_in_bounds(s.center, CFG.patch_size, case.shape)
            if s.class_label == HEALTHY:
                assert fg[s.center] and not case.gold.data[s.center]


def test_healthy_centres_on_regular_lattice(small_cases):
    case = small_cases[0]
    healthy = [s.center for s in sample_centers(case, CFG, np.random.default_rng(0)) if s.class_label == HEALTHY]
    assert len(set(healthy)) == len(healthy)
    pts = np.asarray(healthy)
    for axis in range(3):
        vals = np.unique(pts[:, axis])
        if len(vals) > 2:
            assert len(np.unique(np.diff(vals))) == 1


def test_lesion_reuse_varies_augmentation():
    shape = (32, 32, 20)
    img = np.ones(shape, np.float32)
    gold = np.zeros(shape, bool)
    gold[15, 15, 10] = gold[16, 15, 10] = True
    case = MultiModalCase("tiny", (Volume(img),), Mask(gold))
    cfg = SamplerConfig(goal_per_case=24, patch_size=(8, 8, 4))
    lesion = [s for s in sample_centers(case, cfg, np.random.default_rng(0)) if s.class_label == LESION]
    assert len(lesion) == 12
    for voxel in {s.source_voxel for s in lesion}:
        augs = [s.augmentation for s in lesion if s.source_voxel == voxel]
        assert sorted(augs) == sorted(AUGMENTATIONS)


def test_deterministic_and_order_independent(small_cases):
    a = build_patch_set(small_cases[:3], CFG)
    b = build_patch_set(small_cases[:3], CFG)
    np.testing.assert_array_equal(a.train_x, b.train_x)
    assert a.train_specs == b.train_specs
    c = build_patch_set(small_cases[2:3], CFG)
    assert [s for s in a.provenance if s.case_id == small_cases[2].case_id] == c.provenance
    d = build_patch_set(small_cases[:3], SamplerConfig(goal_per_case=200, seed=12))
    assert d.train_specs != a.train_specs


def test_validation_split(small_cases):
    ps = build_patch_set(small_cases[:2], CFG)
    assert len(ps.val_x) == 80 and len(ps.train_x) == 320
    assert ps.train_y.shape == (320, 2, 24, 24, 16) and ps.train_y.dtype == np.uint8
    np.testing.assert_array_equal(ps.train_y.sum(1), 1)
    assert not set(map(id, ps.train_specs)) & set(map(id, ps.val_specs))


def test_extracted_target_matches_gold(small_cases):
    case = small_cases[1]
    for s in sample_centers(case, CFG, np.random.default_rng(3))[::17]:
        unaug = PatchSpec(s.case_id, s.center, s.class_label)
        x, y = extract_patch(case, unaug, CFG)
        lo, hi = window_bounds(s.center, CFG.patch_size)
        sl = tuple(slice(a, b) for a, b in zip(lo, hi))
        np.testing.assert_array_equal(y[1].astype(bool), case.gold.data[sl])
        np.testing.assert_array_equal(x, case.stack()[(slice(None),) + sl])


@pytest.mark.parametrize("op", AUGMENTATIONS)
def test_augmentation_commutes_with_labels(rng, op):
    x = rng.normal(size=(2, 6, 6, 4)).astype(np.float32)
    labels = (x[0] > 0.3).astype(np.int64)
    y = np.stack([1 - labels, labels])
    ax, ay = augment_patch(x, y, op)
    # label of the augmented patch equals the rule applied to the augmented image
    np.testing.assert_array_equal(ay[1], (ax[0] > 0.3).astype(ay.dtype))
    assert sorted(ax.ravel()) == sorted(x.ravel())


def test_augmentation_definitions():
    x = np.arange(2 * 2 * 1).reshape(1, 2, 2, 1).astype(float)
    y = x.copy()
    np.testing.assert_array_equal(augment_patch(x, y, "sagittal-reflect")[0], x[:, ::-1])
    np.testing.assert_array_equal(augment_patch(x, y, "rot180")[0], x[:, ::-1, ::-1])
    comb = augment_patch(x, y, "sagittal-reflect-combined")[0]
    np.testing.assert_array_equal(comb, x[:, :, ::-1])
    with pytest.raises(ValueError):
        augment_patch(x, y, "shear")


def test_empty_gold_and_small_volume():
    vol = Volume(np.ones((32, 32, 20)))
    with pytest.raises(SamplingError, match="empty"):
        sample_centers(MultiModalCase("e", (vol,), Mask(np.zeros((32, 32, 20)))), CFG, np.random.default_rng(0))
    gold = np.zeros((16, 16, 8)); gold[8, 8, 4] = 1
    small = MultiModalCase("s", (Volume(np.ones((16, 16, 8))),), Mask(gold))
    with pytest.raises(SamplingError, match="smaller than patch"):
        sample_centers(small, CFG, np.random.default_rng(0))


def test_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(patch_size=(24, 24, 15))
    with pytest.raises(ValueError):
        SamplerConfig(max_offset=(13, 0, 0))
    assert SamplerConfig().max_offset == (12, 12, 8)


def test_patch_cache_round_trip(small_cases, tmp_path):
    ps = build_patch_set(small_cases[:1], SamplerConfig(goal_per_case=20))
    save_patch_set(ps, tmp_path)
    back = load_patch_set(tmp_path)
    np.testing.assert_array_equal(back.train_x, ps.train_x)
    np.testing.assert_array_equal(back.val_y, ps.val_y)
    assert back.train_specs == ps.train_specs and back.val_specs == ps.val_specs
    with open(tmp_path / "patches.bin", "ab") as fh:
        fh.write(b"\0\0\0\0")
    with pytest.raises(SamplingError):
        load_patch_set(tmp_path)
