import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tacgen import masks, sensor, synth, data
from tacgen.data import ForceVector

P = sensor.SensorParams()
BG = sensor.render_background(P)
MASK = masks.prototype_mask("cyl_mid")


def test_background_is_deterministic_and_bounded():
    np.testing.assert_array_equal(BG, sensor.render_background(P))
    assert BG.shape == (64, 64, 3) and BG.min() >= 0.27 and BG.max() <= 0.73


def test_zero_force_is_background():
    img, hm = sensor.render(MASK, ForceVector(0, 0, 0), P, BG)
    np.testing.assert_array_equal(img, BG)
    assert not hm.any()


@given(st.floats(1.0, 9.0))
def test_height_scales_with_normal_force(fz):
    _, h1 = sensor.render(MASK, ForceVector(0, 0, fz), P, BG)
    _, h2 = sensor.render(MASK, ForceVector(0, 0, fz + 1), P, BG)
    assert h2.max() > h1.max()
    np.testing.assert_allclose(h1.max(), P.k_gel * fz, rtol=1e-5)
    assert not h1[~MASK.astype(bool)].any()


def test_shear_moves_the_height_peak():
    _, h0 = sensor.render(MASK, ForceVector(0, 0, 5), P, BG)
    _, h1 = sensor.render(MASK, ForceVector(1.0, 0, 5), P, BG)
    xs = np.arange(64)
    c0 = (h0.sum(0) * xs).sum() / h0.sum()
    c1 = (h1.sum(0) * xs).sum() / h1.sum()
    assert c1 > c0


def test_render_rejects_bad_inputs():
    with pytest.raises(ValueError, match="outside"):
        sensor.render(MASK, ForceVector(0, 0, 10.5), P, BG)
    with pytest.raises(ValueError, match="empty"):
        sensor.render(np.zeros_like(MASK), ForceVector(0, 0, 1), P, BG)
    with pytest.raises(ValueError, match="shape"):
        sensor.render(np.zeros((32, 32)), ForceVector(0, 0, 1), P, BG)
    with pytest.raises(ValueError, match="unit"):
        sensor.SensorParams(light_dirs=((1, 0, 0), (0, 1, 0), (0, 0, 2)))


def test_synth_dataset_is_order_independent_and_valid(tmp_path):
    cfg = synth.SynthConfig(objects=("cross", "sphere"), positions={"train": 2, "val": 1, "test": 1},
                            forces_per_position=2)
    m = synth.synth_dataset(tmp_path / "a", cfg, P, seed=3)
    loaded = data.load_manifest(tmp_path / "a" / "manifest.json")
    assert loaded == m and len(m) == 2 * 4 * 2
    cfg_rev = synth.SynthConfig(objects=("sphere", "cross"), positions=cfg.positions, forces_per_position=2)
    m2 = synth.synth_dataset(tmp_path / "b", cfg_rev, P, seed=3)
    assert sorted(r.to_json()["force"] for r in m.samples) == sorted(r.to_json()["force"] for r in m2.samples)
    ref = synth.canonical_reference(m, "cross")
    assert ref.pose.theta == 0.0 and ref.split == "train"
    arr = data.load_arrays(loaded)
    rec = loaded.samples[5]
    truth = synth.render_truth(arr.masks[5], rec.force, P, arr.backgrounds[5])
    np.testing.assert_array_equal(truth, arr.images[5])
    groups = synth.group_by_position(loaded.samples)
    assert all(len(v) == 2 for v in groups.values())
