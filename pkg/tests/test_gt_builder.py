import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctexplain.errors import DimensionMismatch, PayloadSizeMismatch, UnknownLocation
from ctexplain.gt_builder import (
    DownsampleConfig,
    GtCache,
    build_gtruth,
    downsample_mask,
    load_gtruth,
    location_mask,
    save_gtruth,
)
from ctexplain.organ_seg import OrganMasks, heuristic_mask, segment_organs
from ctexplain.report_labeler import label_report
from ctexplain.volgrid import BinaryMask3D, PhantomSpec, generate_phantom

ABN = ("nodule", "mass", "cardiomegaly", "pleural_effusion")
TARGET = (4, 6, 6)


def brute_nearest(src, target):
    out = np.zeros(target, dtype=bool)
    for idx in np.ndindex(*target):
        # continuous preimage of the target cell center, then the source cell containing it
        pos = [int(np.floor((i + 0.5) * s / t)) for i, s, t in zip(idx, src.shape, target)]
        out[idx] = src[tuple(pos)]
    return out


def nearest_upsample(grid, factors):
    for ax, f in enumerate(factors):
        grid = np.repeat(grid, f, axis=ax)
    return grid


@pytest.fixture(scope="module")
def organs():
    vol, truth, _ = generate_phantom(PhantomSpec())
    masks, report = segment_organs(vol)
    assert report.passed
    return masks


# ---------------------------------------------------------------------------
# Downsampling
# ---------------------------------------------------------------------------


@given(st.integers(0, 2**31 - 1))
def test_nearest_matches_index_oracle(seed):
    mask = np.random.default_rng(seed).random((4, 4, 4)) < 0.5
    np.testing.assert_array_equal(downsample_mask(mask, (2, 2, 2)), brute_nearest(mask, (2, 2, 2)))


@given(st.integers(0, 2**31 - 1), st.tuples(st.integers(1, 7), st.integers(1, 9), st.integers(1, 9)))
def test_nearest_matches_oracle_on_uneven_grids(seed, target):
    mask = np.random.default_rng(seed).random((7, 9, 9)) < 0.5
    np.testing.assert_array_equal(downsample_mask(mask, target), brute_nearest(mask, target))


@pytest.mark.parametrize("cfg", DownsampleConfig.all_variants(), ids=lambda c: c.name)
def test_all_ones_stays_all_ones(cfg):
    assert downsample_mask(np.ones((8, 10, 12), dtype=bool), (3, 4, 5), cfg).all()


def test_single_voxel_area_average_is_below_threshold():
    m = np.zeros((4, 4, 4), dtype=bool)
    m[1, 1, 1] = True
    assert not downsample_mask(m, (2, 2, 2), DownsampleConfig("area")).any()
    m2 = np.zeros((2, 2, 2), dtype=bool)
    m2[0, 0, 0] = True
    full = np.zeros((4, 4, 4), dtype=bool)
    full[:2, :2, :2] = True
    np.testing.assert_array_equal(downsample_mask(full, (2, 2, 2), DownsampleConfig("area")), m2)


def test_target_larger_than_source_raises():
    with pytest.raises(DimensionMismatch):
        downsample_mask(np.ones((2, 2, 2), dtype=bool), (3, 2, 2))


@given(st.integers(0, 2**31 - 1), st.sampled_from(["nearest", "trilinear", "area"]))
def test_dilation_never_clears_bits(seed, algo):
    mask = np.random.default_rng(seed).random((8, 8, 8)) < 0.4
    plain = downsample_mask(mask, (4, 4, 4), DownsampleConfig(algo))
    dil = downsample_mask(mask, (4, 4, 4), DownsampleConfig(algo, dilate=True))
    assert np.all(dil >= plain)


@given(st.integers(0, 2**31 - 1))
def test_nearest_down_up_down_is_idempotent(seed):
    mask = np.random.default_rng(seed).random((8, 12, 12)) < 0.5
    down = downsample_mask(mask, (4, 4, 6))
    again = downsample_mask(nearest_upsample(down, (2, 3, 2)), (4, 4, 6))
    np.testing.assert_array_equal(again, down)


def test_six_variants_distinct_on_asymmetric_mask(organs):
    # the experiment's attention grid for the default phantom
    grids = [downsample_mask(organs.left_lung, (8, 12, 12), cfg) for cfg in DownsampleConfig.all_variants()]
    assert len({g.tobytes() for g in grids}) == 6


# ---------------------------------------------------------------------------
# Ground truth assembly
# ---------------------------------------------------------------------------


def test_mass_in_left_lung_only(organs):
    gt = build_gtruth([("mass", "left_lung")], organs, TARGET, ABN)
    np.testing.assert_array_equal(gt.G[1].astype(bool), downsample_mask(organs.left_lung, TARGET))
    assert gt.G[[0, 2, 3]].sum() == 0
    assert gt.rows_included.all()


def test_multi_location_is_union(organs):
    gt = build_gtruth([("pleural_effusion", "right_lung"), ("pleural_effusion", "left_lung")], organs, TARGET, ABN)
    expected = downsample_mask(organs.right_lung, TARGET) | downsample_mask(organs.left_lung, TARGET)
    np.testing.assert_array_equal(gt.G[3].astype(bool), expected)
    single = build_gtruth([("pleural_effusion", "right_lung")], organs, TARGET, ABN)
    assert np.all(gt.G[3] >= single.G[3])


def test_other_location_is_unconstrained(organs):
    gt = build_gtruth([("nodule", "other")], organs, TARGET, ABN)
    assert gt.G[0].all()
    assert location_mask(organs, "other") is None


def test_lung_row_disjoint_from_mediastinum_row(organs):
    gt = build_gtruth([("nodule", "lung_unspecified"), ("cardiomegaly", "heart")], organs, TARGET, ABN)
    assert not (gt.G[0] & gt.G[2]).any()
    assert gt.G[0].any() and gt.G[2].any()


def test_heuristic_provenance_and_no_labels():
    masks = heuristic_mask((24, 48, 48))
    gt = build_gtruth([("nodule", "right_lung")], masks, TARGET, ABN)
    assert gt.provenance["heuristic"] is True
    assert gt.G[0].astype(bool).tolist() == downsample_mask(masks.right_lung, TARGET).tolist()
    empty = build_gtruth([], masks, TARGET, ABN)
    assert empty.G.sum() == 0 and empty.rows_included.all()


def test_skip_mode_flags_absent_rows(organs):
    gt = build_gtruth([("mass", "left_lung")], organs, TARGET, ABN, absent_mode="skip")
    assert gt.rows_included.tolist() == [False, True, False, False]


def test_accepts_labels_object_and_rejects_unknown_location(organs):
    lab = label_report(["there is a nodule in the right upper lobe"])
    gt = build_gtruth(lab, organs, TARGET, ABN)
    np.testing.assert_array_equal(gt.G[0].astype(bool), downsample_mask(organs.right_lung, TARGET))
    with pytest.raises(UnknownLocation):
        build_gtruth([("nodule", "kidney")], organs, TARGET, ABN)


# ---------------------------------------------------------------------------
# Persistence and cache
# ---------------------------------------------------------------------------


def test_packed_roundtrip(tmp_path, organs):
    gt = build_gtruth([("mass", "left_lung"), ("cardiomegaly", "heart")], organs, (3, 5, 7), ABN,
                      DownsampleConfig("trilinear", True), "skip")
    save_gtruth(gt, tmp_path / "x.gt.json")
    back = load_gtruth(tmp_path / "x.gt.json")
    np.testing.assert_array_equal(back.G, gt.G)
    np.testing.assert_array_equal(back.rows_included, gt.rows_included)
    assert back.provenance == gt.provenance
    raw = tmp_path / "x.gt.raw"
    raw.write_bytes(raw.read_bytes()[:-1])
    with pytest.raises(PayloadSizeMismatch):
        load_gtruth(tmp_path / "x.gt.json")


def test_cache_hit_and_invalidation(tmp_path, organs):
    cache = GtCache(tmp_path)
    pairs = [("nodule", "right_lung")]
    a, hit_a = cache.get_or_build("s1", pairs, organs, TARGET, ABN)
    b, hit_b = cache.get_or_build("s1", pairs, organs, TARGET, ABN)
    assert (hit_a, hit_b) == (False, True)
    np.testing.assert_array_equal(a.G, b.G)
    _, hit_c = cache.get_or_build("s1", pairs, organs, TARGET, ABN, DownsampleConfig("area"))
    _, hit_d = cache.get_or_build("s1", [("mass", "left_lung")], organs, TARGET, ABN)
    assert not hit_c and not hit_d
    assert len(list((tmp_path / "s1").glob("*.gt.json"))) == 3
