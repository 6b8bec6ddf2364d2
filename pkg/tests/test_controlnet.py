import pytest
import torch

from tacgen import controlnet as CN
from tacgen.diffusion import LatentPairs, TrainConfig, TrainingError

from helpers import latents, tiny_generator


def test_zero_init_matches_stage1():
    g = tiny_generator(depth=4, dim=32)
    pg = CN.init_controlnet(g)
    z = latents(6)
    t = torch.tensor([1, 10, 20, 30, 40, 50])
    dF = torch.randn(6, 3, generator=torch.Generator().manual_seed(0))
    mask = latents(6, seed=9)
    torch.testing.assert_close(pg(z, t, z, dF, z_mask=mask), g.model(z, t, z, dF), rtol=0, atol=0)
    res = CN.controlnet_residuals(pg, z, t, z, dF, mask)
    assert len(res) == 2 and all(not r.any() for r in res)


def test_structure_and_freezing():
    g = tiny_generator(depth=4)
    pg = CN.init_controlnet(g)
    assert len(pg.cn.blocks) == 2
    assert all(not p.requires_grad for p in CN.frozen_parameters(pg))
    assert all(p.requires_grad for p in pg.cn.parameters())
    with pytest.raises(ValueError, match="mask"):
        pg(latents(1), 1, latents(1), torch.zeros(1, 3))
    with pytest.raises(ValueError, match="force-only"):
        CN.PositionGenerator(tiny_generator(mode="hybrid"))


def _pairs(n=16):
    z = latents(n)
    return LatentPairs(z_ref=z, z_tgt=z.roll(2, dims=-1), dF=torch.zeros(n, 3), cond=z.roll(2, dims=-1))


def test_stage2_trains_only_the_controlnet(tmp_path):
    g = tiny_generator(depth=2)
    before = g.fingerprint()
    pg, curve = CN.train_stage2(_pairs(), g, TrainConfig(steps=20, batch=4, lr=1e-3, log_every=5), seed=0)
    assert g.fingerprint() == before
    z = latents(2)
    assert (pg(z, 5, z, torch.zeros(2, 3), z_mask=z) - g.model(z, 5, z, torch.zeros(2, 3))).abs().max() > 0
    pg.save(tmp_path / "cn.pt")
    back = CN.PositionGenerator.load(tmp_path / "cn.pt", g)
    torch.testing.assert_close(back(z, 5, z, torch.zeros(2, 3), z_mask=z), pg(z, 5, z, torch.zeros(2, 3), z_mask=z))
    other = tiny_generator(depth=2, seed=3)
    with pytest.raises(TrainingError, match="fingerprint"):
        CN.PositionGenerator.load(tmp_path / "cn.pt", other)


def test_stage2_requires_masks():
    p = _pairs()
    p.cond = None
    with pytest.raises(TrainingError, match="mask"):
        CN.train_stage2(p, tiny_generator(), TrainConfig(steps=1, batch=2), seed=0)


def test_gradient_leak_detected(monkeypatch):
    g = tiny_generator(depth=2)
    pg = CN.init_controlnet(g)
    real_fit = CN.fit

    def leaky_fit(model, *a, **kw):
        with torch.no_grad():
            next(model.parameters()).add_(1.0)
        return real_fit(model, *a, **kw)

    monkeypatch.setattr(CN, "fit", leaky_fit)
    with pytest.raises(TrainingError, match="gradient leak"):
        CN.train_stage2(_pairs(), g, TrainConfig(steps=1, batch=2), seed=0, pg=pg)
