"""Position control: a trainable copy of the first half of a frozen stage-1 DiT.

The copy receives the trunk's block-0 input plus a zero-initialised embedding
of the mask latent.  After each copied block a zero-initialised linear layer
produces a residual that is added to the output of the matching frozen block,
so at initialisation the combined model reproduces stage 1 exactly.
"""

from __future__ import annotations

import copy
import os
from typing import Sequence

import torch
import torch.nn as nn

from .diffusion import (DiT, Generator, LatentPairs, NoiseSchedule, TrainConfig, TrainingError, derive_init_seed,
                        fit)
from .utils import checksum, fingerprint

WEIGHTS_VERSION = "tacgen-controlnet/1"


def _zero(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class ControlNet(nn.Module):
    def __init__(self, base: DiT):
        super().__init__()
        cfg = base.cfg
        half = cfg.depth // 2
        self.blocks = nn.ModuleList([copy.deepcopy(base.blocks[i]) for i in range(half)])
        self.adapter = _zero(nn.Conv2d(cfg.latent_channels, cfg.dim, cfg.patch, stride=cfg.patch))
        self.proj = nn.ModuleList([_zero(nn.Linear(cfg.dim, cfg.dim)) for _ in range(half)])
        for p in self.parameters():
            p.requires_grad_(True)

    def branch(self, h0: torch.Tensor, c: torch.Tensor, z_mask: torch.Tensor) -> list[torch.Tensor]:
        h = h0 + self.adapter(z_mask).flatten(2).transpose(1, 2)
        out = []
        for blk, proj in zip(self.blocks, self.proj):
            h = blk(h, c)
            out.append(proj(h))
        return out


class PositionGenerator(nn.Module):
    """Frozen stage-1 trunk plus its ControlNet; call like a DiT with a mask latent."""

    def __init__(self, base: Generator, cn: ControlNet | None = None):
        super().__init__()
        if base.config.mode != "force-only":
            raise ValueError("ControlNet attaches to a force-only stage-1 model")
        self.base = base
        self.trunk = base.model
        for p in self.trunk.parameters():
            p.requires_grad_(False)
        self.trunk.eval()
        self.cn = ControlNet(self.trunk) if cn is None else cn
        self.base_fingerprint = base.fingerprint()

    @property
    def cfg(self):
        return self.trunk.cfg

    @property
    def schedule(self) -> NoiseSchedule:
        return self.base.schedule

    @property
    def codec_fingerprint(self) -> str:
        return self.base.codec_fingerprint

    def residuals(self, z_t, t, z_ref, dF, z_mask) -> list[torch.Tensor]:
        t = torch.as_tensor(t).reshape(-1).expand(z_t.shape[0])
        h0 = self.trunk.embed(z_t, z_ref)
        return self.cn.branch(h0, self.trunk.condition(t, dF), z_mask)

    def forward(self, z_t, t, z_ref, dF=None, z_mask=None, control=None):
        if z_mask is None:
            raise ValueError("position control needs a mask latent")
        t = torch.as_tensor(t).reshape(-1).expand(z_t.shape[0])
        h0 = self.trunk.embed(z_t, z_ref)
        c = self.trunk.condition(t, dF)
        return self.trunk.run_blocks(h0, c, self.cn.branch(h0, c, z_mask))

    def save(self, path: os.PathLike) -> None:
        # the frozen trunk is referenced by fingerprint, never duplicated
        torch.save({"version": WEIGHTS_VERSION, "base_fingerprint": self.base_fingerprint,
                    "state": self.cn.state_dict()}, path)

    @classmethod
    def load(cls, path: os.PathLike, base: Generator) -> "PositionGenerator":
        blob = torch.load(path, weights_only=False)
        if blob.get("version") != WEIGHTS_VERSION:
            raise TrainingError(f"{path}: unsupported ControlNet weights version")
        if blob["base_fingerprint"] != base.fingerprint():
            raise TrainingError("ControlNet was trained on a different stage-1 model (fingerprint mismatch)")
        pg = cls(base)
        pg.cn.load_state_dict(blob["state"])
        pg.eval()
        return pg


def init_controlnet(stage1: Generator) -> PositionGenerator:
    if stage1.config.depth % 2:
        raise ValueError("stage-1 depth must be even")
    return PositionGenerator(stage1)


def controlnet_residuals(pg: PositionGenerator, z_t, t, z_ref, dF, z_mask) -> list[torch.Tensor]:
    return pg.residuals(z_t, t, z_ref, dF, z_mask)


def train_stage2(pairs: LatentPairs, stage1: Generator, tc: TrainConfig, seed: int,
                 pg: PositionGenerator | None = None) -> tuple[PositionGenerator, list]:
    """Fine-tune only the ControlNet; aborts if any frozen trunk weight changes.

    ``pairs.cond`` holds the target-position mask latents.
    """
    if pairs.cond is None:
        raise TrainingError("stage 2 needs mask latents")
    if pg is None:
        torch.manual_seed(derive_init_seed(seed, "stage2"))
        pg = init_controlnet(stage1)
    frozen = list(pg.trunk.parameters())
    before = checksum(frozen)
    before_fp = fingerprint(pg.trunk)

    def control_fn(z_t, t, z_ref, dF, cond):
        return pg(z_t, t, z_ref, dF, z_mask=cond)

    pg.cn.train()
    curve = fit(pg.trunk, pairs, stage1.schedule, tc, seed, params=pg.cn.parameters(),
                control_fn=control_fn, tag="stage2")
    pg.trunk.eval()
    pg.cn.eval()
    if checksum(frozen) != before or fingerprint(pg.trunk) != before_fp:
        raise TrainingError("gradient leak: frozen stage-1 parameters changed during stage-2 training")
    return pg, curve


def frozen_parameters(pg: PositionGenerator) -> Sequence[torch.Tensor]:
    return list(pg.trunk.parameters())
