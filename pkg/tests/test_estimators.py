import numpy as np
import pytest
import torch

from tacgen import estimators as E
from tacgen import masks, sensor
from tacgen.data import ForceVector


def test_traditional_counts():
    assert len(E.traditional_variants("geometric")) == 864
    assert len(E.traditional_variants("geometric+color")) == 5184
    assert len(set(E.traditional_variants("geometric+color"))) == 5184
    with pytest.raises(ValueError):
        E.traditional_variants("colour")


def _contact(fz=6.0):
    p = sensor.SensorParams()
    bg = sensor.render_background(p)
    img, _ = sensor.render(masks.prototype_mask("cyl_mid"), ForceVector(0, 0, fz), p, bg)
    return img, bg


def test_apply_variant_identity_and_hue():
    img, bg = _contact()
    np.testing.assert_array_equal(E.apply_variant(img, bg, E.Variant()), img)
    shifted = E.apply_variant(img, bg, E.Variant(tx=20))
    far = np.abs(shifted - bg).mean(-1)
    assert far[:, 50:].sum() > np.abs(img - bg).mean(-1)[:, 50:].sum()
    hue = E.apply_variant(img, bg, E.Variant(hue=120))
    assert hue.shape == img.shape and 0 <= hue.min() and hue.max() <= 1


def test_apply_variant_quarter_turn_matches_rot90():
    img, bg = _contact()
    rot = E.apply_variant(img, bg, E.Variant(rotation=90))
    diff = np.abs(rot - bg).mean(-1) > 0.02
    ref = np.abs(np.rot90(img - bg)).mean(-1) > 0.02
    assert (diff == ref).mean() > 0.98


def test_traditional_augment_shapes():
    img, bg = _contact()
    refs = np.stack([img, img])
    x, y = E.traditional_augment(refs, bg, [0, 1], "geometric", seed=0, n_per_class=5)
    assert x.shape == (10, 64, 64, 3) and list(y) == [0] * 5 + [1] * 5
    with pytest.raises(ValueError, match="one reference"):
        E.traditional_augment(refs, bg, [0, 0], "geometric", seed=0, n_per_class=1)


def test_cnn_dimensions():
    assert E.cnn_flatten_width(224) == 256 * 14 * 14
    net = E.CNNClassifier(3, 64)
    assert net(torch.zeros(2, 3, 64, 64)).shape == (2, 3)


def test_head_widths():
    assert E.head_width(E.EstimatorConfig(task="force")) == 3
    assert E.head_width(E.EstimatorConfig(task="pose")) == 4
    assert E.head_width(E.EstimatorConfig(task="pose", angle_mode="degrees")) == 3
    with pytest.raises(ValueError):
        E.EstimatorConfig(task="depth")


def _force_set(n=48):
    p = sensor.SensorParams()
    bg = sensor.render_background(p)
    m = masks.prototype_mask("sphere")
    rng = np.random.default_rng(0)
    fz = rng.uniform(1, 10, n)
    imgs = np.stack([sensor.render(m, ForceVector(0, 0, f), p, bg)[0] for f in fz])
    forces = np.stack([np.zeros(n), np.zeros(n), fz], 1).astype(np.float32)
    return E.TrainSet(imgs, forces), fz


def test_force_estimator_learns_and_roundtrips(tmp_path):
    ts, fz = _force_set()
    cfg = E.EstimatorConfig(task="force", dim=32, depth=1, steps=150, batch=16, lr=2e-3)
    w = E.train_force_estimator(ts, cfg, seed=0)
    pred = E.predict_forces(w, ts.images)
    assert np.abs(pred[:, 2] - fz).mean() < np.abs(fz - fz.mean()).mean()
    w.save(tmp_path / "w.pt")
    back = E.EstimatorWeights.load(tmp_path / "w.pt")
    np.testing.assert_array_equal(E.predict_forces(back, ts.images), pred)
    assert isinstance(E.predict_force(back, ts.images[0]), ForceVector)
    with pytest.raises(E.EstimatorError, match="task mismatch"):
        E.predict_poses(back, ts.images[:1], 360.0)
    w2 = E.train_force_estimator(ts, cfg, seed=0)
    np.testing.assert_array_equal(E.predict_forces(w2, ts.images), pred)


def test_pose_prediction_angle_decoding():
    cfg = E.EstimatorConfig(task="pose", dim=16, depth=1)
    w = E.EstimatorWeights(cfg, E.build_model(cfg))
    out = E.predict_poses(w, np.zeros((2, 64, 64, 3), np.float32), [90.0, 0.0])
    assert 0 <= out[0, 2] < 90 and out[1, 2] == 0.0


def test_pose_errors_symmetry_aware():
    pred = np.array([[10, 10, 179.0], [0, 0, 5.0]])
    truth = np.array([[13, 14, 1.0], [0, 0, 90.0]])
    c, a = E.pose_errors(pred, truth, [180.0, 0.0])
    assert c == pytest.approx(2.5) and a == pytest.approx(2.0)


def test_classifier_and_label_checks():
    imgs = np.zeros((8, 64, 64, 3), np.float32)
    imgs[4:] = 1.0
    ts = E.TrainSet(imgs, labels=np.array([0] * 4 + [1] * 4))
    cfg = E.EstimatorConfig(task="classify", dim=16, depth=1, steps=30, batch=8, lr=3e-3, dropout=0.0)
    w = E.train_classifier("vit", ts, cfg, seed=0)
    assert E.accuracy(w, imgs, ts.labels) == 1.0
    cls, scores = E.classify(w, imgs[5])
    assert cls == 1 and scores.sum() == pytest.approx(1.0)
    with pytest.raises(E.EstimatorError, match="class mismatch"):
        E.accuracy(w, imgs, np.array([2] * 8))
    with pytest.raises(E.EstimatorError, match="two classes"):
        E.train_classifier("cnn", E.TrainSet(imgs, labels=np.zeros(8, np.int64)), cfg, seed=0)


def test_trainset_concat_fills_heights():
    a = E.TrainSet(np.zeros((2, 4, 4, 3)), np.zeros((2, 3)), heights=np.ones((2, 4, 4)))
    b = E.TrainSet(np.zeros((1, 4, 4, 3)), np.zeros((1, 3)))
    c = E.TrainSet.concat([a, b])
    assert len(c) == 3 and np.isnan(c.heights[2]).all() and c.poses is None


def test_mae_by_axis():
    np.testing.assert_allclose(E.mae_by_axis([[1, 2, 3]], [[0, 0, 0]]), [1, 2, 3])
