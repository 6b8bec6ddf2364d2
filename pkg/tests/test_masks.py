import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tacgen import masks
from tacgen.data import ContactPose
from tacgen.masks import IDENTITY, MaskTransform


def _blob(seed, h=64, w=64):
    rng = np.random.default_rng(seed)
    m = np.zeros((h, w), np.uint8)
    x0, y0 = rng.integers(20, 36, size=2)
    m[y0:y0 + rng.integers(3, 9), x0:x0 + rng.integers(3, 9)] = 1
    return m


@pytest.mark.parametrize("obj", masks.OBJECTS)
def test_prototypes_are_binary_nonempty_and_centred(obj):
    m = masks.prototype_mask(obj)
    assert m.dtype == np.uint8 and set(np.unique(m)) == {0, 1}
    cx, cy = masks.centroid_of_mask(m)
    assert abs(cx - 31.5) <= 1 and abs(cy - 31.5) <= 6


@pytest.mark.parametrize("obj, period", [(o, p) for o, p in masks.OBJECT_SYMMETRY.items() if p > 0])
def test_prototype_symmetry_period(obj, period):
    m = masks.prototype_mask(obj)
    if period % 90 == 0:
        rotated = masks.transform_mask(m, MaskTransform(0, 0, int(period) % 360))
        np.testing.assert_array_equal(rotated, m)
    if period < 360:
        assert not np.array_equal(masks.transform_mask(m, MaskTransform(0, 0, 45)), m)


def test_identity_is_exact():
    m = _blob(0)
    np.testing.assert_array_equal(masks.transform_mask(m, IDENTITY), m)


@given(st.integers(-10, 10), st.integers(-10, 10), st.integers(-10, 10), st.integers(-10, 10))
def test_translations_compose(dx1, dy1, dx2, dy2):
    m = _blob(1)
    a = masks.transform_mask(masks.transform_mask(m, MaskTransform(dx1, dy1, 0)), MaskTransform(dx2, dy2, 0))
    b = masks.transform_mask(m, MaskTransform(dx1 + dx2, dy1 + dy2, 0))
    np.testing.assert_array_equal(a, b)


def test_four_quarter_turns_return_original():
    m = _blob(2)
    r = m
    for _ in range(4):
        r = masks.transform_mask(r, MaskTransform(0, 0, 90))
    np.testing.assert_array_equal(r, m)
    np.testing.assert_array_equal(masks.transform_mask(m, MaskTransform(0, 0, 90)), np.rot90(m, k=-1))


@given(st.integers(-359, 359))
def test_rotation_keeps_mask_binary(deg):
    out = masks.transform_mask(masks.prototype_mask("tshape"), MaskTransform(0, 0, deg))
    assert set(np.unique(out)) <= {0, 1}


def test_transform_validation():
    with pytest.raises(ValueError, match="integer"):
        MaskTransform(0.5, 0, 0)
    with pytest.raises(ValueError, match="outside"):
        MaskTransform(0, 0, 360)
    with pytest.raises(ValueError, match="exceeds"):
        masks.transform_mask(_blob(0), MaskTransform(64, 0, 0))
    with pytest.raises(ValueError, match="empty"):
        masks.centroid_of_mask(np.zeros((4, 4)))


def test_pose_off_frame_raises():
    with pytest.raises(ValueError, match="off-frame"):
        masks.pose_from_transform(ContactPose(60.0, 30.0, 0.0), MaskTransform(10, 0, 0))


@given(st.integers(-8, 8), st.integers(-8, 8), st.sampled_from([0, 90, 180, 270]))
def test_pose_tracks_centroid(dx, dy, deg):
    m = masks.prototype_mask("cross")
    t = MaskTransform(dx, dy, deg)
    pose = masks.pose_from_transform(masks.canonical_pose(), t, period=90.0)
    cx, cy = masks.centroid_of_mask(masks.transform_mask(m, t))
    assert abs(pose.cx - cx) <= 1 and abs(pose.cy - cy) <= 1
    assert pose.theta == 0.0
