import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spgt.disparity import (NATIVE, NORMALIZED, InstanceDisparityMap, InvalidDisparityError,
                            RoiPair, StereoRig, backproject, denormalize_disparity,
                            full_to_instance, in_search_range, instance_to_full,
                            lift_instance_cloud, normalize_disparity, project, smooth_l1,
                            smooth_l1_disparity_loss, to_normalized)

RIG = StereoRig(721.0, 721.0, 600.0, 170.0, 0.54, (1242, 375))
finite = st.floats(-1e4, 1e4, allow_nan=False)


def pair_with(b_l, b_r, w_l=50.0, w_r=50.0, y=100.0, h=40.0):
    return RoiPair((b_l, y, w_l, h), (b_r, y, w_r, h))


def native_map(values, mask, pair):
    return InstanceDisparityMap(np.asarray(values, float), np.asarray(mask, bool), pair, NATIVE)


# -- instance <-> full frame --------------------------------------------------

def test_full_to_instance_examples():
    assert full_to_instance(30.0, pair_with(100, 80)) == 10.0
    assert full_to_instance(30.0, pair_with(77, 77)) == 30.0
    assert instance_to_full(62.1, pair_with(110, 100)) == pytest.approx(72.1, abs=1e-12)
    assert instance_to_full(5.5, pair_with(3, 3)) == 5.5


@settings(max_examples=200)
@given(x=finite, b_l=st.floats(0, 1200), b_r=st.floats(0, 1200))
def test_offset_round_trip(x, b_l, b_r):
    pair = pair_with(b_l, b_r)
    assert abs(instance_to_full(full_to_instance(x, pair), pair) - x) <= 1e-12 * max(1.0, abs(x), b_l, b_r)


def test_offset_round_trip_vectorized(rng):
    pair = pair_with(412.7, 380.2)
    x = rng.uniform(-100, 100, 1000)
    assert np.max(np.abs(instance_to_full(full_to_instance(x, pair), pair) - x)) <= 1e-12


# -- width normalization ------------------------------------------------------

def test_normalize_examples():
    assert normalize_disparity(10.0, pair_with(0, 0, w_l=112, w_r=100)) == pytest.approx(20.0)
    assert normalize_disparity(7.3, pair_with(0, 0, w_l=200, w_r=224)) == 7.3


@settings(max_examples=200)
@given(x=finite, w_l=st.floats(1, 600), w_r=st.floats(1, 600))
def test_normalize_round_trip(x, w_l, w_r):
    pair = pair_with(0, 0, w_l=w_l, w_r=w_r)
    back = denormalize_disparity(normalize_disparity(x, pair), pair)
    assert abs(back - x) <= 1e-12 * max(1.0, abs(x))


def test_aligned_width_and_native_roi():
    pair = RoiPair((100.4, 50.2, 40.0, 30.0), (80.0, 48.0, 45.5, 31.0))
    assert pair.aligned_width == 45.5
    assert pair.offset == pytest.approx(20.4)
    # union of vertical extents, horizontal span from the left border
    assert pair.native_roi() == (100, 48, 46, 33)


def test_roi_pair_invariants():
    with pytest.raises(ValueError):
        RoiPair((0, 0, 0, 5), (0, 0, 3, 5))
    with pytest.raises(ValueError):
        RoiPair((0, 0, 3, 5), (0, 0, 3, 5), (0, 224))
    p = RoiPair((1, 2, 3, 4), (0, 2, 5, 4))
    assert RoiPair.from_dict(p.to_dict()) == p


# -- back-projection ----------------------------------------------------------

def test_principal_ray_backprojection():
    pair = pair_with(110, 100)
    p = backproject(RIG.c_u, RIG.c_v, 62.1, pair, RIG)
    assert p == pytest.approx([0.0, 0.0, 5.4], abs=1e-12)


def test_doubling_disparity_halves_depth():
    pair = pair_with(50, 40)
    a = backproject(700.0, 200.0, 20.0, pair, RIG)
    b = backproject(700.0, 200.0, 50.0, pair, RIG)  # 30 -> 60 effective
    assert b[2] * 2 == a[2]


def test_project_backproject_identity(rng):
    pts = np.column_stack([rng.uniform(-20, 20, 1000), rng.uniform(-3, 3, 1000),
                           rng.uniform(2, 80, 1000)])
    u, v, d_full = project(pts, RIG)
    pair = pair_with(300.0, 270.0)
    back = backproject(u, v, full_to_instance(d_full, pair), pair, RIG)
    assert np.max(np.abs(back - pts)) <= 1e-9


def test_depth_strictly_decreasing_in_disparity():
    d = np.linspace(-9.5, 200, 500)
    Z = backproject(600.0, 170.0, d, pair_with(20, 10), RIG)[:, 2]
    assert np.all(np.diff(Z) < 0)


@pytest.mark.parametrize("d", [-10.0, -12.0])
def test_nonpositive_effective_disparity_raises(d):
    with pytest.raises(InvalidDisparityError):
        backproject(600.0, 170.0, d, pair_with(20, 10), RIG)


# -- lifting ------------------------------------------------------------------

def test_lift_empty_mask():
    pair = pair_with(100, 90, w_l=10, w_r=10, h=10)
    cloud = lift_instance_cloud(native_map(np.zeros((10, 10)), np.zeros((10, 10)), pair), RIG)
    assert cloud.points.shape == (0, 3)


def test_lift_caps_at_768_deterministically():
    pair = pair_with(100, 90, w_l=40, w_r=40, h=25)
    mask = np.ones((25, 40), bool)
    values = np.random.default_rng(0).uniform(20, 30, mask.shape)
    dmap = native_map(values, mask, pair)
    a = lift_instance_cloud(dmap, RIG, seed=5)
    b = lift_instance_cloud(dmap, RIG, seed=5)
    c = lift_instance_cloud(dmap, RIG, seed=6)
    assert len(a.points) == 768 and a.seed == 5 and a.rng == "PCG64"
    assert np.array_equal(a.points, b.points)
    assert not np.array_equal(a.points, c.points)
    # row-major order is kept after subsampling
    order = a.pixels[:, 1] * 10000 + a.pixels[:, 0]
    assert np.all(np.diff(order) > 0)


def test_lift_constant_disparity_is_planar():
    pair = pair_with(400, 380, w_l=30, w_r=30, h=20)
    d_inst = 16.05
    dmap = native_map(np.full((20, 30), d_inst), np.ones((20, 30)), pair)
    cloud = lift_instance_cloud(dmap, RIG, max_points=None)
    Z = RIG.B * RIG.f_u / (d_inst + 20)
    assert len(cloud.points) == 600
    assert np.allclose(cloud.points[:, 2], Z, rtol=1e-14)
    x0, y0 = pair.native_roi()[:2]
    u = x0 + np.tile(np.arange(30), 20)
    v = y0 + np.repeat(np.arange(20), 30)
    assert np.allclose(cloud.points[:, 0], (u - RIG.c_u) / RIG.f_u * Z, atol=1e-12)
    assert np.allclose(cloud.points[:, 1], (v - RIG.c_v) / RIG.f_v * Z, atol=1e-12)


def test_lift_skips_invalid_pixels():
    pair = pair_with(400, 380, w_l=4, w_r=4, h=1)
    dmap = native_map([[5.0, -25.0, -20.0, 1.0]], [[1, 1, 1, 1]], pair)
    cloud = lift_instance_cloud(dmap, RIG)
    assert cloud.skipped == 2 and len(cloud.points) == 2


def test_lift_requires_native_units():
    pair = pair_with(0, 0, w_l=4, w_r=4, h=4)
    m = InstanceDisparityMap(np.zeros((4, 4)), np.ones((4, 4)), pair, NORMALIZED)
    with pytest.raises(ValueError):
        lift_instance_cloud(m, RIG)


# -- smooth L1 ----------------------------------------------------------------

def one_pixel(value):
    pair = RoiPair((0, 0, 224, 1), (0, 0, 224, 1))
    return InstanceDisparityMap(np.full((1, 1), value), np.ones((1, 1)), pair, NORMALIZED)


def test_smooth_l1_examples():
    assert smooth_l1_disparity_loss(one_pixel(3.0), one_pixel(3.0)) == 0.0
    assert smooth_l1_disparity_loss(one_pixel(3.5), one_pixel(3.0)) == pytest.approx(0.125)
    assert smooth_l1_disparity_loss(one_pixel(0.0), one_pixel(3.0)) == pytest.approx(2.5)


def test_smooth_l1_is_c1_at_beta():
    h = 1e-7
    for b in (1.0, -1.0):
        left = (smooth_l1(b) - smooth_l1(b - h)) / h
        right = (smooth_l1(b + h) - smooth_l1(b)) / h
        assert abs(left - right) <= 1e-6
        assert abs(smooth_l1(b + 1e-12) - smooth_l1(b - 1e-12)) < 1e-11


def test_smooth_l1_restricted_to_gt_mask():
    pair = RoiPair((0, 0, 112, 2), (0, 0, 112, 2))
    gt = InstanceDisparityMap(np.array([[1.0, 2.0]]), np.array([[True, False]]), pair, NATIVE,
                              (0, 0, 2, 1))
    pred = InstanceDisparityMap(np.array([[1.25, 50.0]]), np.array([[True, True]]), pair, NATIVE,
                                (0, 0, 2, 1))
    # 0.25 native px -> 0.5 normalized px
    assert smooth_l1_disparity_loss(pred, gt) == pytest.approx(0.125)


def test_smooth_l1_empty_foreground():
    pair = RoiPair((0, 0, 224, 1), (0, 0, 224, 1))
    empty = InstanceDisparityMap(np.zeros((1, 1)), np.zeros((1, 1)), pair, NORMALIZED)
    with pytest.raises(ValueError):
        smooth_l1_disparity_loss(empty, empty)


# -- normalized maps and range ------------------------------------------------

def test_to_normalized_scales_by_width_only():
    pair = RoiPair((10, 0, 56, 30), (0, 0, 50, 30))
    dmap = native_map(np.full((30, 56), 7.0), np.ones((30, 56)), pair)
    norm = to_normalized(dmap)
    assert norm.shape == (224, 224) and norm.units == NORMALIZED
    assert np.allclose(norm.values[norm.mask], 28.0)


def test_in_search_range():
    pair = pair_with(0, 0, w_l=2, w_r=2, h=1)
    assert in_search_range(native_map([[-48.0, 48.0]], [[1, 1]], pair))
    assert not in_search_range(native_map([[-48.5, 0.0]], [[1, 1]], pair))
    assert in_search_range(native_map([[-100.0, 0.0]], [[0, 1]], pair))
