import filecmp
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from vtryon.dataset import (CATEGORIES, CLASS, HEATMAP_HALF, MASK_FILL, NON_MODIFIABLE_CLASSES, NUM_CLASSES,
                            NUM_KEYPOINTS, DatasetError, GarmentCategory, MissingAnnotationError,
                            ParseValueError, SampleRecord, build_agnostic, class_pixel_counts, class_weights,
                            default_dilation_radius, densepose_tensor, dilate, garment_region, limb_region,
                            load_dataset, load_record, pose_heatmap, read_split, unpair, DressCodeDataset,
                            write_record)
from vtryon.synthetic import generate_synthetic, synthetic_pairs, synthetic_records


def blank_record(h=64, w=48, parse=None, keypoints=None, category=GarmentCategory.UPPER_BODY):
    kp = np.zeros((NUM_KEYPOINTS, 3)) if keypoints is None else keypoints
    return SampleRecord(
        model_image=np.random.default_rng(1).random((h, w, 3)).astype(np.float32),
        garment_image=np.zeros((h, w, 3), np.float32), keypoints=kp,
        densepose_labels=np.zeros((h, w), np.int64), densepose_uv=np.zeros((h, w, 2), np.float32),
        parse=np.zeros((h, w), np.int64) if parse is None else parse, category=category, item_id="x")


def test_three_categories():
    assert [c.value for c in CATEGORIES] == ["upper_body", "lower_body", "dresses"]


# --- pose heatmap -----------------------------------------------------------

def test_heatmap_center_block_sums_to_121():
    kp = np.zeros((NUM_KEYPOINTS, 3))
    kp[3] = (24, 32, 1.0)
    hm = pose_heatmap(kp, (64, 48))
    assert hm[3].sum() == 121
    assert hm.sum() == 121


def test_heatmap_all_missing_is_zero():
    assert not pose_heatmap(np.zeros((NUM_KEYPOINTS, 3)), (64, 48)).any()


def test_heatmap_corner_is_clipped_6x6():
    kp = np.zeros((NUM_KEYPOINTS, 3))
    kp[0] = (0, 0, 1.0)
    hm = pose_heatmap(kp, (64, 48))
    # brute-force window enumeration
    expect = sum(1 for y in range(-HEATMAP_HALF, HEATMAP_HALF + 1) for x in range(-HEATMAP_HALF, HEATMAP_HALF + 1)
                 if 0 <= y < 64 and 0 <= x < 48)
    assert hm[0].sum() == expect == 36


@given(st.lists(st.tuples(st.floats(0, 47), st.floats(0, 63), st.floats(0, 1)), min_size=18, max_size=18))
def test_heatmap_binary_and_channel_sums_bounded(points):
    kp = np.array(points)
    hm = pose_heatmap(kp, (64, 48))
    assert set(np.unique(hm)) <= {0.0, 1.0}
    for s in hm.reshape(NUM_KEYPOINTS, -1).sum(1):
        assert s == 0 or 36 <= s <= 121


# --- dense pose -------------------------------------------------------------

def test_densepose_background():
    t = densepose_tensor(np.zeros((8, 6), int), np.zeros((8, 6, 2)))
    assert t.shape == (27, 8, 6)
    assert t[0].all() and not t[1:25].any()


def test_densepose_single_pixel():
    labels = np.zeros((8, 6), int)
    labels[2, 3] = 7
    assert densepose_tensor(labels, np.zeros((8, 6, 2)))[7].sum() == 1


def test_densepose_rejects_label_25():
    with pytest.raises(ValueError):
        densepose_tensor(np.full((2, 2), 25), np.zeros((2, 2, 2)))


@given(arrays(np.int64, (7, 5), elements=st.integers(0, 24)),
       arrays(np.float32, (7, 5, 2), elements=st.floats(0, 1, width=32)))
def test_densepose_partition(labels, uv):
    t = densepose_tensor(labels, uv)
    assert np.all(t[:25].sum(0) == 1)
    assert np.array_equal(t[:25].argmax(0), labels)
    assert np.array_equal(t[25:], uv.transpose(2, 0, 1))


# --- agnostic ---------------------------------------------------------------

def test_agnostic_empty_when_nothing_in_scope():
    rec = blank_record()
    ag = build_agnostic(rec, GarmentCategory.UPPER_BODY)
    assert not ag.mask.any()
    assert np.array_equal(ag.image, rec.model_image)


def test_agnostic_one_pixel_garment_dilates_to_11x11_minus_face():
    parse = np.zeros((64, 48), np.int64)
    parse[30, 20] = CLASS["top"]
    parse[26:29, 15:26] = CLASS["face"]
    rec = blank_record(parse=parse)
    ag = build_agnostic(rec, GarmentCategory.UPPER_BODY, radius=5)
    # set-algebra oracle
    square = np.zeros((64, 48), bool)
    square[25:36, 15:26] = True
    expect = square & (parse != CLASS["face"])
    assert np.array_equal(ag.mask, expect)
    assert np.all(ag.image[ag.mask] == MASK_FILL)
    assert np.array_equal(ag.image[~ag.mask], rec.model_image[~ag.mask])
    assert np.all(ag.parse[ag.mask] == 0)


def test_default_dilation_radius():
    assert default_dilation_radius(256) == 5
    assert default_dilation_radius(1024) == 20
    assert default_dilation_radius(64) == 1


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**16), st.sampled_from(CATEGORIES), st.integers(0, 4))
def test_agnostic_never_masks_non_modifiable_and_is_monotone(seed, category, r):
    rec = synthetic_records(1, (64, 48), seed=seed)[0]
    parse = rec.parse.copy()
    noise = np.random.default_rng(seed).integers(0, NUM_CLASSES, parse.shape)
    parse = np.where(np.random.default_rng(seed + 1).random(parse.shape) < 0.1, noise, parse)
    rec = SampleRecord(**{**rec.__dict__, "parse": parse})
    small = build_agnostic(rec, category, radius=r)
    big = build_agnostic(rec, category, radius=r + 1)
    assert not small.mask[np.isin(parse, NON_MODIFIABLE_CLASSES)].any()
    assert np.all(big.mask >= small.mask)
    region = dilate(garment_region(parse, category) | limb_region(rec.keypoints, category, rec.size), r)
    assert np.array_equal(small.mask, region & ~np.isin(parse, NON_MODIFIABLE_CLASSES))


# --- unpair -----------------------------------------------------------------

def test_unpair_examples():
    up = GarmentCategory.UPPER_BODY
    assert unpair({up: ["a"]}) == [("a", "a")]
    assert unpair({up: ["0", "1", "2"]}) == [("0", "1"), ("1", "2"), ("2", "0")]


@given(st.lists(st.integers(0, 10**6), min_size=2, max_size=50, unique=True))
def test_unpair_bijective_fixed_point_free(ids):
    ids = [str(i) for i in ids]
    pairs = unpair({GarmentCategory.DRESSES: ids})
    assert sorted(m for m, _ in pairs) == sorted(ids)
    assert sorted(g for _, g in pairs) == sorted(ids)
    assert all(m != g for m, g in pairs)


def test_unpair_full_test_split_size():
    ids = {c: [f"{c.value}{i}" for i in range(1800)] for c in CATEGORIES}
    pairs = unpair(ids)
    assert len(pairs) == 5400
    assert all(m != g for m, g in pairs)


# --- class weights ----------------------------------------------------------

def test_class_weights_symmetric_two_classes():
    parse = np.array([[0, 1], [1, 0]])
    w = class_weights([parse])
    assert w[0] == w[1] > 0 and not w[2:].any()


def test_class_weights_ratio_three():
    parse = np.array([0, 0, 0, 1])
    w = class_weights([parse])
    counts = np.bincount(parse, minlength=NUM_CLASSES)
    assert w[1] / w[0] == pytest.approx(counts[0] / counts[1]) == pytest.approx(3.0)


def test_class_weights_single_class():
    w = class_weights([np.full((4, 4), 5)])
    assert np.isfinite(w[5]) and w[5] > 0 and np.count_nonzero(w) == 1


def test_class_weights_uniform_gives_one():
    parse = np.arange(NUM_CLASSES).repeat(3)
    assert np.allclose(class_weights([parse]), 1.0)


@given(arrays(np.int64, (6, 5), elements=st.integers(0, NUM_CLASSES - 1)))
def test_class_weights_algebraic_identity(parse):
    counts = class_pixel_counts([parse])
    w = class_weights([parse])
    present = np.count_nonzero(counts)
    assert (counts * w).sum() == pytest.approx(parse.size * present / NUM_CLASSES)
    assert np.all((w > 0) == (counts > 0))


# --- synthetic generator & on-disk layout ------------------------------------

def test_synthetic_rejects_nonpositive_n(tmp_path):
    with pytest.raises(ValueError):
        generate_synthetic(0, root=tmp_path / "x")


def test_synthetic_deterministic_byte_identical(tmp_path):
    a = generate_synthetic(4, (64, 48), seed=7, root=tmp_path / "a")
    b = generate_synthetic(4, (64, 48), seed=7, root=tmp_path / "b")
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert files_a == files_b and len(files_a) > 0
    assert all(filecmp.cmp(a / f, b / f, shallow=False) for f in files_a)


def test_synthetic_keypoints_in_bounds_256():
    for rec in synthetic_records(1, (256, 192), seed=0):
        rec.validate()
        assert np.all(rec.keypoints[:, 0] <= 191) and np.all(rec.keypoints[:, 1] <= 255)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**16))
def test_synthetic_parse_lies_on_drawn_shapes(seed):
    # background channels lie in [0.87, 0.97]; every paint colour has a channel <= 0.8,
    # so coverage is recoverable from the image alone
    for rec in synthetic_records(1, (64, 48), seed=seed):
        painted = rec.model_image.min(-1) < 0.86
        assert np.array_equal(painted, rec.parse > 0)
        rec.validate()


def test_synthetic_pairs_balanced():
    recs = synthetic_pairs(16)
    counts = [sum(r.category == c for r in recs) for c in CATEGORIES]
    assert sum(counts) == 16 and max(counts) - min(counts) <= 1


def test_round_trip_twelve_items(tmp_path):
    root = generate_synthetic(4, (64, 48), seed=2, root=tmp_path)
    original = synthetic_records(4, (64, 48), seed=2)
    loaded = list(load_dataset(root, (64, 48)))
    assert len(loaded) == 12
    by_id = {r.item_id: r for r in loaded}
    for rec in original:
        got = by_id[rec.item_id]
        got.validate()
        assert got.category == rec.category
        for name in ("model_image", "garment_image", "keypoints", "densepose_labels", "densepose_uv", "parse"):
            assert np.array_equal(getattr(got, name), getattr(rec, name)), name


def test_empty_root(tmp_path):
    ds = DressCodeDataset(tmp_path)
    assert list(ds) == [] and ds.errors == []


def test_missing_annotation_reports_item(tmp_path):
    root = generate_synthetic(1, (64, 48), seed=0, root=tmp_path)
    (root / "upper_body" / "keypoints" / "000000_2.json").unlink()
    with pytest.raises(MissingAnnotationError) as err:
        list(load_dataset(root))
    assert err.value.item_id == "000000"
    ds = DressCodeDataset(root, skip_missing=True)
    assert len(list(ds)) == 2 and [e.item_id for e in ds.errors] == ["000000"]


def test_parse_value_out_of_range_is_hard_error(tmp_path):
    rec = synthetic_records(1, (64, 48), seed=0)[0]
    write_record(tmp_path, rec)
    from PIL import Image
    bad = rec.parse.copy()
    bad[0, 0] = 18
    Image.fromarray(bad.astype(np.uint8), mode="L").save(tmp_path / "upper_body" / "label_maps" / "000000_4.png")
    with pytest.raises(ParseValueError):
        load_record(tmp_path, GarmentCategory.UPPER_BODY, "000000")


def test_validate_rejects_bad_aspect_and_keypoints():
    rec = blank_record(h=64, w=64)
    with pytest.raises(DatasetError):
        rec.validate()
    kp = np.zeros((NUM_KEYPOINTS, 3))
    kp[0] = (100, 10, 1.0)
    with pytest.raises(DatasetError):
        blank_record(keypoints=kp).validate()


def test_load_rescales_resolution(tmp_path):
    root = generate_synthetic(1, (128, 96), seed=0, root=tmp_path)
    rec = next(load_dataset(root, (64, 48)))
    assert rec.size == (64, 48)
    src = synthetic_records(1, (128, 96), seed=0)[0]
    present = src.keypoints[:, 2] >= 0.1
    assert np.allclose(rec.keypoints[present, :2], src.keypoints[present, :2] / 2, atol=0.5)


def test_read_split_counts(tmp_path):
    root = generate_synthetic(4, (64, 48), seed=0, root=tmp_path, test_fraction=0.5)
    split = read_split(root)
    assert split.total("train") == 6 and split.total("test") == 6
    assert not split.matches_dress_code()


def test_palette_manifest(tmp_path):
    root = generate_synthetic(1, (64, 48), seed=0, root=tmp_path)
    manifest = json.loads((root / "palette.json").read_text())
    assert len(manifest["classes"]) == NUM_CLASSES
