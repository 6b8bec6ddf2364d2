import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from tacgen import diffusion as D
from tacgen.data import ForceVector

from helpers import latents, tiny_generator


def test_schedule_shapes_and_monotone():
    s = D.NoiseSchedule(T=100)
    assert s.betas.shape == (100,) and s.alpha_bar.shape == (101,)
    assert s.alpha_bar[0] == 1.0 and np.all(np.diff(s.alpha_bar) < 0)
    with pytest.raises(ValueError):
        D.NoiseSchedule(beta_start=0.1, beta_end=0.01)


def test_add_noise_boundaries():
    s = D.NoiseSchedule(T=100)
    z0, eps = latents(2), latents(2, seed=1)
    torch.testing.assert_close(D.add_noise(z0, 0, eps, s), z0)
    zt = D.add_noise(z0, torch.tensor([100, 100]), eps, s)
    ab = s.alpha_bar[100]
    torch.testing.assert_close(zt, float(np.sqrt(ab)) * z0 + float(np.sqrt(1 - ab)) * eps)
    with pytest.raises(ValueError, match="range"):
        D.add_noise(z0, 101, eps, s)
    with pytest.raises(ValueError, match="shape"):
        D.add_noise(z0, 1, eps[:1], s)


@pytest.mark.parametrize("target", D.TARGETS)
@given(st.floats(0.01, 0.99))
def test_split_prediction_inverts_training_target(target, ab):
    z0, eps = latents(2, dtype=torch.float64), latents(2, seed=1, dtype=torch.float64)
    ab = torch.tensor(ab, dtype=torch.float64)
    zt = ab.sqrt() * z0 + (1 - ab).sqrt() * eps
    x0, e = D.split_prediction(D.training_target(z0, eps, ab, target), zt, ab, target)
    torch.testing.assert_close(x0, z0)
    torch.testing.assert_close(e, eps)


def test_delta_force():
    d = D.compute_delta_force(ForceVector(1, 2, 8), ForceVector(0.5, 0, 3))
    np.testing.assert_allclose(d.as_array(), [0.5, 2, 5])


def test_config_validation():
    with pytest.raises(ValueError, match="even"):
        D.DiTConfig(depth=3)
    with pytest.raises(ValueError, match="divisible"):
        D.DiTConfig(dim=10, heads=3)
    with pytest.raises(ValueError, match="mode"):
        D.DiTConfig(mode="other")


@pytest.mark.parametrize("mode", D.MODES)
def test_forward_shapes_by_mode(mode):
    g = tiny_generator(mode=mode)
    z = latents(3)
    dF = torch.zeros(3, 3)
    out = g.model(z, torch.tensor([1, 5, 9]), z, dF, z_mask=None if mode == "force-only" else z)
    assert out.shape == z.shape
    if mode != "force-only":
        with pytest.raises(ValueError, match="mask"):
            g.model(z, 1, z, dF)


def test_fresh_model_predicts_zero():
    g = tiny_generator(scramble=False)
    z = latents(2)
    assert not g.model(z, 3, z, torch.ones(2, 3)).any()


def test_force_changes_prediction():
    g = tiny_generator()
    z = latents(2)
    a = g.model(z, 3, z, torch.zeros(2, 3))
    b = g.model(z, 3, z, torch.ones(2, 3))
    assert (a - b).abs().max() > 1e-4


@pytest.mark.parametrize("target", ["x0", "v"])
def test_predict_noise_converts_targets(target):
    g = tiny_generator(target=target)
    z, t = latents(2), torch.tensor([4, 7])
    out = g.model(z, t, z, torch.zeros(2, 3))
    ab = torch.as_tensor(g.schedule.alpha_bar, dtype=z.dtype)[t].view(-1, 1, 1, 1)
    torch.testing.assert_close(D.predict_noise(g, z, t, z, torch.zeros(2, 3)),
                               D.split_prediction(out, z, ab, target)[1])


def test_generator_save_load(tmp_path):
    g = tiny_generator()
    g.save(tmp_path / "g.pt")
    back = D.Generator.load(tmp_path / "g.pt")
    assert back.fingerprint() == g.fingerprint() and back.config == g.config
    with pytest.raises(D.TrainingError, match="codec"):
        back.check_codec("other")


def test_pair_builders():
    groups = {("a", 1): [0, 1, 2], ("a", 2): [3], ("b", 1): [4, 5]}
    pairs = D.build_force_pairs(groups, 200, seed=0)
    key_of = {i: k for k, v in groups.items() for i in v}
    assert all(key_of[a] == key_of[b] for a, b in pairs)
    assert any(a == b for a, b in pairs) and any(a != b for a, b in pairs)
    assert pairs == D.build_force_pairs(groups, 200, seed=0)
    with pytest.raises(D.TrainingError, match="partner"):
        D.build_force_pairs({("a", 1): [0]}, 5, seed=0)
    tup = D.build_position_tuples(groups, 50, seed=0, exclude=("b",))
    assert all(key_of[a][0] == key_of[b][0] == "a" and key_of[a] != key_of[b] for a, b in tup)
    with pytest.raises(D.TrainingError):
        D.build_position_tuples(groups, 5, seed=0, exclude=("a",))


def _pairs(n=32, cond=False):
    z = latents(n)
    return D.LatentPairs(z_ref=z, z_tgt=z.roll(1, dims=-1), dF=torch.zeros(n, 3), cond=z if cond else None)


def test_training_reduces_loss_and_is_reproducible():
    cfg = D.DiTConfig(latent_channels=4, latent_size=8, patch=2, depth=2, dim=32, heads=2, force_dim=8)
    tc = D.TrainConfig(steps=60, batch=8, lr=3e-3, lr_min=3e-4, log_every=10)
    g1, curve = D.train_stage1(_pairs(), cfg, D.NoiseSchedule(T=50), tc, seed=0, codec_fp="fp")
    g2, _ = D.train_stage1(_pairs(), cfg, D.NoiseSchedule(T=50), tc, seed=0, codec_fp="fp")
    assert curve[-1][1] < curve[0][1]
    assert g1.fingerprint() == g2.fingerprint()


def test_baseline_trainers_check_modes():
    cfg = D.DiTConfig(latent_channels=4, latent_size=8, patch=2, depth=2, dim=16, heads=2, force_dim=8)
    tc = D.TrainConfig(steps=1, batch=2)
    s = D.NoiseSchedule(T=50)
    with pytest.raises(ValueError):
        D.train_hybrid(_pairs(cond=True), cfg, s, tc, 0, "fp")
    hcfg = D.DiTConfig(**{**cfg.__dict__, "mode": "hybrid"})
    with pytest.raises(D.TrainingError, match="mask"):
        D.train_hybrid(_pairs(), hcfg, s, tc, 0, "fp")
    g, _ = D.train_hybrid(_pairs(cond=True), hcfg, s, tc, 0, "fp")
    assert g.meta["kind"] == "hybrid"
    scfg = D.DiTConfig(**{**cfg.__dict__, "mode": "separate"})
    g, _ = D.train_separate_position(_pairs(cond=True), scfg, s, tc, 0, "fp")
    assert g.meta["kind"] == "separate"


def test_nonfinite_loss_raises():
    cfg = D.DiTConfig(latent_channels=4, latent_size=8, patch=2, depth=2, dim=16, heads=2, force_dim=8)
    p = _pairs()
    p.z_tgt[:] = float("nan")
    with pytest.raises(D.TrainingError, match="non-finite"):
        D.train_stage1(p, cfg, D.NoiseSchedule(T=50), D.TrainConfig(steps=2, batch=2), 0, "fp")
