import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tacgen import data
from tacgen.data import ContactPose, DatasetManifest, ForceVector, ManifestError, SampleRecord

angles = st.floats(-1e4, 1e4, allow_nan=False)
periods = st.sampled_from([0.0, 90.0, 180.0, 360.0])


def _record(sid="a", **kw):
    base = dict(id=sid, image=f"img/{sid}.png", background="bg.png", mask=None, height=None,
                force=ForceVector(0.1, -0.2, 5.0), pose=ContactPose(30.0, 31.0, 10.0),
                object_id="cross", split="train", provenance="real")
    base.update(kw)
    return SampleRecord(**base)


def _write_dataset(root, records, objects=None):
    (root / "img").mkdir(exist_ok=True)
    data.save_image(root / "bg.png", np.full((64, 64, 3), 0.5, np.float32))
    for r in records:
        data.save_image(root / r.image, np.zeros((64, 64, 3), np.float32))
    m = DatasetManifest(samples=list(records), objects=objects or {"cross": 90.0}, root=root)
    data.save_manifest(m, root / "manifest.json")
    return m


@given(angles, periods)
def test_canonical_angle_in_range(theta, period):
    a = data.canonical_angle(theta, period)
    if period == 0:
        assert a == 0.0
    else:
        assert 0.0 <= a < period
        assert data.angle_error(a, theta, period) < 1e-6 * max(1.0, abs(theta))


@given(angles, angles, periods)
def test_angle_error_symmetric_and_bounded(a, b, period):
    e = data.angle_error(a, b, period)
    assert e == pytest.approx(data.angle_error(b, a, period), abs=1e-6)
    assert 0.0 <= e <= period / 2 + 1e-9


@given(arrays(np.uint8, (8, 8, 3)))
def test_image_roundtrip_exact_at_8bit(tmp_path_factory, pixels):
    path = tmp_path_factory.mktemp("img") / "x.png"
    img = pixels.astype(np.float32) / 255.0
    data.save_image(path, img)
    back = data.load_image(path)
    assert back.dtype == np.float32
    np.testing.assert_array_equal(data.to_uint8(back), pixels)
    assert back.min() >= 0.0 and back.max() <= 1.0


def test_mask_and_height_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    m = (rng.random((64, 64)) > 0.5).astype(np.uint8)
    data.save_mask(tmp_path / "m.png", m)
    np.testing.assert_array_equal(data.load_mask(tmp_path / "m.png"), m)
    h = rng.uniform(0, 1.5, (64, 64)).astype(np.float32)
    data.save_height(tmp_path / "h.png", h, 1e-4)
    assert np.abs(data.load_height(tmp_path / "h.png", 1e-4) - h).max() <= 0.5e-4 + 1e-7


@given(arrays(np.float32, (4, 4, 3), elements=st.floats(0, 1, width=32)),
       arrays(np.float32, (4, 4, 3), elements=st.floats(0.25, 0.75, width=32)))
def test_background_roundtrip_where_unclamped(img, bg):
    diff = data.subtract_background(img, bg)
    back = data.add_background(diff, bg)
    unclamped = (img - bg + 0.5 > 0) & (img - bg + 0.5 < 1)
    np.testing.assert_allclose(back[unclamped], img[unclamped], atol=1e-6)


def test_background_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        data.subtract_background(np.zeros((4, 4, 3)), np.zeros((5, 4, 3)))


def test_manifest_roundtrip_and_canonicalises_angles(tmp_path):
    recs = [_record("a", pose=ContactPose(30.0, 31.0, 100.0)), _record("b", split="test")]
    m = _write_dataset(tmp_path, recs)
    loaded = data.load_manifest(tmp_path / "manifest.json")
    assert [r.id for r in loaded.samples] == ["a", "b"]
    assert loaded.samples[0].pose.theta == pytest.approx(10.0)
    assert loaded.period("cross") == 90.0
    assert len(loaded.split("test")) == 1
    assert loaded.samples[1] == m.samples[1]


@pytest.mark.parametrize("bad, match", [
    ({"split": "dev"}, "unknown split"),
    ({"provenance": "scraped"}, "unknown provenance"),
    ({"provenance": "synthetic"}, "without height"),
    ({"force": ForceVector(0, 0, 11.0)}, "outside"),
    ({"pose": ContactPose(70.0, 3.0, 0.0)}, "off-frame"),
    ({"object_id": "teapot"}, "not declared"),
])
def test_manifest_rejects_invalid_records(tmp_path, bad, match):
    with pytest.raises(ManifestError, match=match):
        data.save_manifest(DatasetManifest(samples=[_record(**bad)], objects={"cross": 90.0}),
                           tmp_path / "manifest.json")


def test_manifest_rejects_duplicates_and_missing_files(tmp_path):
    with pytest.raises(ManifestError, match="duplicate"):
        data.save_manifest(DatasetManifest(samples=[_record(), _record()]), tmp_path / "m.json")
    _write_dataset(tmp_path, [_record()])
    (tmp_path / "img" / "a.png").unlink()
    with pytest.raises(ManifestError, match="missing image"):
        data.load_manifest(tmp_path / "manifest.json")
    assert data.load_manifest(tmp_path / "manifest.json", check_files=False).samples[0].id == "a"


def test_manifest_rejects_wrong_image_size(tmp_path):
    _write_dataset(tmp_path, [_record()])
    data.save_image(tmp_path / "img" / "a.png", np.zeros((32, 64, 3), np.float32))
    with pytest.raises(ManifestError, match="expected"):
        data.load_manifest(tmp_path / "manifest.json")


def test_manifest_missing_header_and_bad_json(tmp_path):
    p = tmp_path / "manifest.json"
    p.write_text("{")
    with pytest.raises(ManifestError, match="not valid JSON"):
        data.load_manifest(p)
    p.write_text(json.dumps({"seed": 0, "samples": []}))
    with pytest.raises(ManifestError, match="sensor"):
        data.load_manifest(p)
    with pytest.raises(ManifestError, match="not found"):
        data.load_manifest(tmp_path / "nope.json")


def test_merge_makes_paths_absolute(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    _write_dataset(a, [_record("x")])
    _write_dataset(b, [_record("y", provenance="generated")])
    merged = data.merge_manifests([data.load_manifest(a / "manifest.json"), data.load_manifest(b / "manifest.json")])
    assert [r.id for r in merged.samples] == ["x", "y"]
    assert all(r.image.startswith("/") for r in merged.samples)
    arrays_ = data.load_arrays(merged)
    assert arrays_.images.shape == (2, 64, 64, 3)
    assert arrays_.masks is None
    with pytest.raises(ManifestError, match="duplicate"):
        data.merge_manifests([data.load_manifest(a / "manifest.json")] * 2)


def test_merge_rejects_different_sensors(tmp_path):
    m1 = DatasetManifest(samples=[_record("x")])
    m2 = DatasetManifest(sensor=data.SensorConfig(h=32, w=32), samples=[])
    with pytest.raises(ManifestError, match="sensor"):
        data.merge_manifests([m1, m2])


def test_force_vector_arithmetic():
    d = ForceVector(1, 2, 3) - ForceVector(0.5, 0.5, 0.5)
    np.testing.assert_allclose(d.as_array(), [0.5, 1.5, 2.5])
    assert replace(ForceVector.from_seq([1, 2, 3]), fz=4.0).fz == 4.0
