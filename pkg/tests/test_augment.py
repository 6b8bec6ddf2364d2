import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tacgen import augment as A
from tacgen import data, masks, sensor, synth
from tacgen.codec import Codec
from tacgen.controlnet import init_controlnet
from tacgen.data import ForceVector
from tacgen.masks import MaskTransform

from helpers import tiny_generator


@given(st.integers(1, 40), st.integers(0, 3), st.integers(0, 3), st.integers(0, 1000))
def test_transform_grid_distinct_and_in_bounds(n, mx, my, seed):
    angles = [0, 90, 180]
    size = (2 * mx + 1) * (2 * my + 1) * len(angles)
    if n > size:
        with pytest.raises(ValueError, match="grid has only"):
            A.sample_transform_grid(n, mx, my, angles, seed)
        return
    ts = A.sample_transform_grid(n, mx, my, angles, seed)
    assert len(set(ts)) == n
    assert all(abs(t.dx) <= mx and abs(t.dy) <= my and t.dtheta in angles for t in ts)
    assert ts == A.sample_transform_grid(n, mx, my, angles, seed)


def test_grid_bounds_checked():
    with pytest.raises(ValueError, match="frame"):
        A.sample_transform_grid(1, 32, 0)
    with pytest.raises(ValueError, match="empty"):
        A.sample_transform_grid(1, 1, 1, angle_set=[])


def test_angle_subset():
    assert A.angle_subset(0.25, 180) == list(range(45))
    assert A.angle_subset(1.0, 360) == list(range(360))
    assert A.angle_subset(0.0, 90) == [0]


def test_force_generators():
    assert A.fixed_forces(3) == [ForceVector(0, 0, A.FIXED_FZ)] * 3
    v = A.varying_forces(50, seed=1, levels=[4, 7])
    assert {f.fz for f in v} == {4, 7} and v == A.varying_forces(50, seed=1, levels=[4, 7])
    u = A.varying_forces(50, seed=1, shear_max=0.5)
    assert all(4 <= f.fz <= 10 and abs(f.fx) <= 0.5 for f in u)


@pytest.fixture(scope="module")
def source(tmp_path_factory):
    root = tmp_path_factory.mktemp("src")
    params = sensor.SensorParams(h=16, w=16)
    cfg = synth.SynthConfig(objects=("cross",), positions={"train": 1}, forces_per_position=2, max_shift=2)
    man = synth.synth_dataset(root, cfg, params, seed=0)
    codec = Codec.identity()
    g = tiny_generator(channels=3, size=16)
    g.codec_fingerprint = codec.fingerprint
    return man, codec, g


def test_force_augment_labels_and_skips(source, tmp_path):
    man, codec, g = source
    ref = man.samples[0]
    forces = [ForceVector(0, 0, 2.0), ForceVector(0, 0, 12.0), ForceVector(0.1, 0, 9.0)]
    out, skipped = A.force_augment(ref, man, forces, g, codec, seed=0, out_dir=tmp_path / "f", steps=2)
    assert skipped == {"force out of range": 1}
    assert [r.force for r in out.samples] == [forces[0], forces[2]]
    assert all(r.provenance == "generated" and r.pose == ref.pose and r.height is None for r in out.samples)


def test_full_augment_labels_follow_conditioning(source, tmp_path):
    man, codec, g = source
    ref = man.samples[0]
    pg = init_controlnet(g)
    ts = [MaskTransform(1, 0, 0), MaskTransform(0, 0, 90), MaskTransform(15, 0, 0)]
    forces = [ForceVector(0, 0, 5.0), ForceVector(0, 0, 2.0)]
    out, skipped = A.full_augment(ref, man, forces, ts, pg, codec, seed=0, out_dir=tmp_path / "g", steps=2)
    assert skipped == {"force out of range": 3, "center off frame": 1}
    assert len(out) == 2
    period = man.period("cross")
    for rec, t in zip(out.samples, ts[:2]):
        expect = masks.pose_from_transform(ref.pose, t, 16, 16, period)
        assert rec.pose == expect and rec.force.fz == 5.0
        m = data.load_mask(out.resolve(rec.mask))
        np.testing.assert_array_equal(m, masks.transform_mask(data.load_mask(man.resolve(ref.mask)), t))


def test_zip_pairing(source):
    man, codec, g = source
    ref = man.samples[0]
    arr = data.load_arrays(man, [ref])
    pg = init_controlnet(g)
    ts = [MaskTransform(0, 0, 0), MaskTransform(1, 1, 0)]
    fs = [ForceVector(0, 0, 5.0), ForceVector(0, 0, 6.0)]
    b = A.full_augment_arrays(arr.images[0], arr.backgrounds[0], arr.masks[0], ref.force, ref.pose, fs, ts, pg,
                              codec, seed=0, period=90.0, pairing="zip", steps=2)
    assert b.forces == fs and len(b) == 2
    with pytest.raises(ValueError, match="equally many"):
        A.full_augment_arrays(arr.images[0], arr.backgrounds[0], arr.masks[0], ref.force, ref.pose, fs[:1], ts,
                              pg, codec, seed=0, pairing="zip", steps=2)


@pytest.mark.parametrize("name", ["desk", "smoke"])
def test_angle_split_sizes_fit_every_split(name):
    from tacgen.experiments import profile
    cfg = profile(name)
    ac, ms = cfg["angle_split"], cfg["data"]["max_shift"]
    period = masks.OBJECT_SYMMETRY[ac["object"]]
    for frac in ac["fractions"]:
        ts = A.sample_transform_grid(ac["per_split"], ms, ms, A.angle_subset(frac, period), seed=0)
        assert len(ts) == ac["per_split"]
