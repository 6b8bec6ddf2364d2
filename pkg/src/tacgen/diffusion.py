"""Force-conditioned latent diffusion transformer and its training loops.

The denoiser sees the noisy target latent channel-concatenated with the
reference latent (and, for the hybrid / separate baselines, a mask latent).
Timestep and relative force are embedded, summed, and injected into every
block through adaptive layer norm.  An optional list of per-block residuals
(one per block in the first half) is added to the block outputs; this is the
hook the position ControlNet uses.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .data import ForceVector
from .utils import derive_seed, fingerprint, l1_mse_loss, log, make_optimizer, np_rng, torch_gen

WEIGHTS_VERSION = "tacgen-generator/1"
MODES = ("force-only", "hybrid", "separate")
TARGETS = ("eps", "x0", "v")
FORCE_SCALE = 0.1  # N^-1, applied to every component of the relative force


class TrainingError(RuntimeError):
    pass


def compute_delta_force(target: ForceVector, initial: ForceVector) -> ForceVector:
    return target - initial


# ------------------------------------------------------------------ schedule


@dataclass(frozen=True)
class NoiseSchedule:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    def __post_init__(self):
        if not (0 < self.beta_start < self.beta_end < 1) or self.T < 2:
            raise ValueError("need 0 < beta_start < beta_end < 1 and T >= 2")

    @property
    def betas(self) -> np.ndarray:
        """betas[t-1] is beta_t for t = 1..T (float64)."""
        return np.linspace(self.beta_start, self.beta_end, self.T, dtype=np.float64)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bar(self) -> np.ndarray:
        """alpha_bar[t] for t = 0..T, with alpha_bar[0] = 1 by convention."""
        return np.concatenate([[1.0], np.cumprod(self.alphas)])


def add_noise(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, t in 1..T per batch element (or scalar).

    ``t = 0`` is accepted as the clean boundary (abar_0 = 1).
    """
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch {tuple(z0.shape)} vs {tuple(eps.shape)}")
    t = torch.as_tensor(t, dtype=torch.long)
    if (t < 0).any() or (t > schedule.T).any():
        raise ValueError(f"step out of range [1, {schedule.T}]")
    ab = torch.as_tensor(schedule.alpha_bar, dtype=z0.dtype)[t]
    if ab.ndim:
        ab = ab.view(-1, *([1] * (z0.ndim - 1)))
    return ab.sqrt() * z0 + (1 - ab).sqrt() * eps


def split_prediction(out: torch.Tensor, z_t: torch.Tensor, ab: torch.Tensor, target: str):
    """Model output -> (x0_hat, eps_hat) for the configured prediction target."""
    sa, sb = ab.sqrt(), (1 - ab).sqrt()
    if target == "eps":
        return (z_t - sb * out) / sa, out
    if target == "x0":
        return out, (z_t - sa * out) / sb
    if target == "v":
        return sa * z_t - sb * out, sb * z_t + sa * out
    raise ValueError(f"unknown prediction target {target!r}")


def training_target(z0: torch.Tensor, eps: torch.Tensor, ab: torch.Tensor, target: str) -> torch.Tensor:
    if target == "eps":
        return eps
    if target == "x0":
        return z0
    if target == "v":
        return ab.sqrt() * eps - (1 - ab).sqrt() * z0
    raise ValueError(f"unknown prediction target {target!r}")


# --------------------------------------------------------------------- model


@dataclass
class DiTConfig:
    latent_channels: int = 4
    latent_size: int = 16
    patch: int = 2
    depth: int = 6
    dim: int = 192
    heads: int = 6
    force_dim: int = 64
    mlp_ratio: float = 4.0
    mode: str = "force-only"
    target: str = "eps"

    def __post_init__(self):
        if self.depth % 2:
            raise ValueError("depth must be even")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if self.latent_size % self.patch:
            raise ValueError("patch must divide the latent size")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}")

    @property
    def in_channels(self) -> int:
        return self.latent_channels * (2 if self.mode == "force-only" else 3)

    @property
    def tokens(self) -> int:
        return (self.latent_size // self.patch) ** 2


def sincos_2d(dim: int, side: int) -> torch.Tensor:
    """Fixed 2D sin-cos position table, (side*side, dim)."""
    def one_d(d, pos):
        omega = 1.0 / 10000 ** (np.arange(d // 2, dtype=np.float64) / (d / 2.0))
        out = np.outer(pos, omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)
    ys, xs = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    emb = np.concatenate([one_d(dim // 2, ys.ravel()), one_d(dim // 2, xs.ravel())], axis=1)
    return torch.from_numpy(emb).float()


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        q, k, v = self.qkv(x).view(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-2, -1)) * (q.shape[-1] ** -0.5)
        out = att.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class DiTBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, dim))
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))

    def forward(self, x, c):
        s1, sc1, g1, s2, sc2, g2 = self.ada(c).chunk(6, dim=-1)
        x = x + g1.unsqueeze(1) * self.attn(modulate(self.norm1(x), s1, sc1))
        x = x + g2.unsqueeze(1) * self.mlp(modulate(self.norm2(x), s2, sc2))
        return x


class FinalLayer(nn.Module):
    def __init__(self, dim: int, patch: int, out_ch: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(dim, 2 * dim))
        self.linear = nn.Linear(dim, patch * patch * out_ch)

    def forward(self, x, c):
        shift, scale = self.ada(c).chunk(2, dim=-1)
        return self.linear(modulate(self.norm(x), shift, scale))


class DiT(nn.Module):
    """Patch transformer denoiser over latents.

    ``forward(z_t, t, z_ref, dF, z_mask=None, control=None)``; ``dF`` is an
    (N, 3) tensor in Newtons.  In ``separate`` mode the second conditioning
    latent is the stage-1 output and the force embedding is not used.
    """

    def __init__(self, cfg: DiTConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        self.patch_embed = nn.Conv2d(cfg.in_channels, d, cfg.patch, stride=cfg.patch)
        self.register_buffer("pos", sincos_2d(d, cfg.latent_size // cfg.patch), persistent=False)
        self.t_embed = nn.Sequential(nn.Linear(256, d), nn.SiLU(), nn.Linear(d, d))
        self.f_embed = nn.Sequential(nn.Linear(3, cfg.force_dim), nn.SiLU(), nn.Linear(cfg.force_dim, d))
        self.blocks = nn.ModuleList([DiTBlock(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)])
        self.final = FinalLayer(d, cfg.patch, cfg.latent_channels)
        self._init()

    def _init(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)
        w = self.patch_embed.weight
        nn.init.xavier_uniform_(w.view(w.shape[0], -1))
        nn.init.zeros_(self.patch_embed.bias)
        for blk in self.blocks:
            nn.init.zeros_(blk.ada[-1].weight)
            nn.init.zeros_(blk.ada[-1].bias)
        nn.init.zeros_(self.final.ada[-1].weight)
        nn.init.zeros_(self.final.ada[-1].bias)
        nn.init.zeros_(self.final.linear.weight)
        nn.init.zeros_(self.final.linear.bias)

    @property
    def half(self) -> int:
        return self.cfg.depth // 2

    def condition(self, t: torch.Tensor, dF: Optional[torch.Tensor]) -> torch.Tensor:
        c = self.t_embed(timestep_embedding(t, 256).to(self.pos.dtype))
        if self.cfg.mode != "separate":
            if dF is None:
                raise ValueError("relative force required")
            c = c + self.f_embed(dF.to(c.dtype) * FORCE_SCALE)
        return c

    def embed(self, z_t, z_ref, z_mask=None) -> torch.Tensor:
        parts = [z_t, z_ref]
        if self.cfg.mode != "force-only":
            if z_mask is None:
                raise ValueError(f"{self.cfg.mode} mode needs a mask (or stage-1) latent")
            parts.append(z_mask)
        x = torch.cat(parts, dim=1)
        if x.shape[1] != self.cfg.in_channels or x.shape[-1] != self.cfg.latent_size:
            raise ValueError(f"input shape {tuple(x.shape)} inconsistent with config")
        h = self.patch_embed(x).flatten(2).transpose(1, 2)
        return h + self.pos.to(h.dtype)

    def unpatchify(self, x: torch.Tensor) -> torch.Tensor:
        p, c, s = self.cfg.patch, self.cfg.latent_channels, self.cfg.latent_size // self.cfg.patch
        x = x.view(x.shape[0], s, s, p, p, c)
        return torch.einsum("nhwpqc->nchpwq", x).reshape(x.shape[0], c, s * p, s * p)

    def run_blocks(self, h, c, control: Optional[Sequence[torch.Tensor]] = None):
        if control is not None and len(control) != self.half:
            raise ValueError(f"expected {self.half} control residuals, got {len(control)}")
        for i, blk in enumerate(self.blocks):
            h = blk(h, c)
            if control is not None and i < self.half:
                h = h + control[i]
        return self.unpatchify(self.final(h, c))

    def forward(self, z_t, t, z_ref, dF=None, z_mask=None, control=None):
        t = torch.as_tensor(t).reshape(-1).expand(z_t.shape[0])
        return self.run_blocks(self.embed(z_t, z_ref, z_mask), self.condition(t, dF), control)


def predict_noise(gen: "Generator", z_t, t, z_ref, dF, control=None, z_mask=None) -> torch.Tensor:
    """Noise estimate for ``z_t``; non-eps prediction targets are converted to eps."""
    model = gen.model
    t = torch.as_tensor(t).reshape(-1).expand(z_t.shape[0])
    out = model(z_t, t, z_ref, dF, z_mask=z_mask, control=control)
    if model.cfg.target == "eps":
        return out
    ab = torch.as_tensor(gen.schedule.alpha_bar, dtype=z_t.dtype)[t].view(-1, 1, 1, 1)
    return split_prediction(out, z_t, ab, model.cfg.target)[1]


# ----------------------------------------------------------------- weights


@dataclass
class Generator:
    model: DiT
    schedule: NoiseSchedule
    codec_fingerprint: str
    meta: dict = field(default_factory=dict)

    @property
    def config(self) -> DiTConfig:
        return self.model.cfg

    def fingerprint(self) -> str:
        return fingerprint(self.model)

    def save(self, path: os.PathLike) -> None:
        torch.save({
            "version": WEIGHTS_VERSION,
            "config": asdict(self.config),
            "schedule": asdict(self.schedule),
            "codec_fingerprint": self.codec_fingerprint,
            "state": self.model.state_dict(),
            "meta": self.meta,
        }, path)

    @classmethod
    def load(cls, path: os.PathLike) -> "Generator":
        blob = torch.load(path, weights_only=False)
        if blob.get("version") != WEIGHTS_VERSION:
            raise TrainingError(f"{path}: unsupported generator weights version {blob.get('version')!r}")
        model = DiT(DiTConfig(**blob["config"]))
        model.load_state_dict(blob["state"])
        model.eval()
        return cls(model, NoiseSchedule(**blob["schedule"]), blob["codec_fingerprint"], blob.get("meta", {}))

    def check_codec(self, codec_fp: str) -> None:
        if codec_fp != self.codec_fingerprint:
            raise TrainingError("codec fingerprint mismatch: generator was trained with a different codec")


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    steps: int = 20000
    batch: int = 16
    lr: float = 1e-4
    lr_min: float = 1e-5
    weight_decay: float = 0.0
    log_every: int = 100


@dataclass
class LatentPairs:
    """Pre-encoded training examples; ``cond`` is the mask or stage-1 latent when used."""

    z_ref: torch.Tensor
    z_tgt: torch.Tensor
    dF: torch.Tensor
    cond: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return len(self.z_tgt)


def build_force_pairs(groups: dict, n_pairs: int, seed: int, identity_rate: float = 0.05) -> list[tuple[int, int]]:
    """Ordered (reference, target) index pairs at a shared contact position.

    ``groups`` maps a position key to sample indices. About ``identity_rate`` of
    the pairs reuse the same sample so the model learns the identity map.
    """
    keys = sorted(groups, key=repr)
    multi = [k for k in keys if len(groups[k]) >= 2]
    if not multi:
        lonely = ", ".join(repr(k) for k in keys[:5])
        raise TrainingError(f"no same-position partner for any sample (e.g. {lonely})")
    rng = np_rng(seed, "force-pairs")
    pairs = []
    for _ in range(n_pairs):
        if rng.random() < identity_rate:
            k = keys[rng.integers(len(keys))]
            i = groups[k][rng.integers(len(groups[k]))]
            pairs.append((i, i))
        else:
            k = multi[rng.integers(len(multi))]
            a, b = rng.choice(len(groups[k]), size=2, replace=False)
            pairs.append((groups[k][a], groups[k][b]))
    return pairs


def build_position_tuples(groups: dict, n: int, seed: int, exclude: Sequence[str] = ()) -> list[tuple[int, int]]:
    """(reference, target) pairs of one object at two different positions."""
    by_obj: dict[str, list] = {}
    for k in sorted(groups, key=repr):
        if k[0] not in exclude:
            by_obj.setdefault(k[0], []).append(k)
    objs = [o for o in sorted(by_obj) if len(by_obj[o]) >= 2]
    if not objs:
        raise TrainingError("need at least two contact positions of one object")
    rng = np_rng(seed, "position-tuples")
    out = []
    for _ in range(n):
        o = objs[rng.integers(len(objs))]
        ka, kb = rng.choice(len(by_obj[o]), size=2, replace=False)
        a = groups[by_obj[o][ka]]
        b = groups[by_obj[o][kb]]
        out.append((a[rng.integers(len(a))], b[rng.integers(len(b))]))
    return out


def diffusion_step_loss(model: DiT, pairs: LatentPairs, idx: torch.Tensor, schedule: NoiseSchedule,
                        gen: torch.Generator, control_fn: Optional[Callable] = None) -> torch.Tensor:
    z0 = pairs.z_tgt[idx]
    t = torch.randint(1, schedule.T + 1, (len(idx),), generator=gen)
    eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    ab = torch.as_tensor(schedule.alpha_bar, dtype=z0.dtype)[t].view(-1, 1, 1, 1)
    z_t = ab.sqrt() * z0 + (1 - ab).sqrt() * eps
    z_ref = pairs.z_ref[idx]
    dF = pairs.dF[idx]
    cond = None if pairs.cond is None else pairs.cond[idx]
    if control_fn is None:
        out = model(z_t, t, z_ref, dF, z_mask=cond)
    else:
        out = control_fn(z_t, t, z_ref, dF, cond)
    return l1_mse_loss(out, training_target(z0, eps, ab, model.cfg.target))


def fit(model: DiT, pairs: LatentPairs, schedule: NoiseSchedule, tc: TrainConfig, seed: int,
        params=None, control_fn: Optional[Callable] = None, tag: str = "stage1") -> list[tuple[int, float, float]]:
    """Generic denoiser training loop; returns the loss log [(step, loss, lr)].

    Batch indices and noise for step ``k`` come from a stream keyed by
    (seed, tag, k), so the curve is reproducible and independent of history.
    """
    params = list(model.parameters()) if params is None else list(params)
    opt, sched = make_optimizer(params, tc.lr, tc.lr_min, tc.steps, tc.weight_decay)
    model.train()
    curve = []
    running = 0.0
    for step in range(tc.steps):
        gen = torch_gen(seed, tag, step)
        idx = torch.randint(0, len(pairs), (tc.batch,), generator=gen)
        loss = diffusion_step_loss(model, pairs, idx, schedule, gen, control_fn)
        if not torch.isfinite(loss):
            raise TrainingError(f"{tag}: non-finite loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        running += loss.item()
        if (step + 1) % tc.log_every == 0 or step == tc.steps - 1:
            n = (step % tc.log_every) + 1
            curve.append((step + 1, running / n, opt.param_groups[0]["lr"]))
            running = 0.0
            if (step + 1) % (tc.log_every * 10) == 0:
                log.info("%s step %d loss %.5f", tag, step + 1, curve[-1][1])
    model.eval()
    return curve


def train_stage1(pairs: LatentPairs, cfg: DiTConfig, schedule: NoiseSchedule, tc: TrainConfig, seed: int,
                 codec_fp: str) -> tuple[Generator, list]:
    if cfg.mode != "force-only":
        raise ValueError("stage 1 uses the force-only conditioning mode")
    torch.manual_seed(derive_init_seed(seed, "stage1"))
    model = DiT(cfg)
    curve = fit(model, pairs, schedule, tc, seed, tag="stage1")
    return Generator(model, schedule, codec_fp, {"kind": "stage1"}), curve


def train_hybrid(pairs: LatentPairs, cfg: DiTConfig, schedule: NoiseSchedule, tc: TrainConfig, seed: int,
                 codec_fp: str) -> tuple[Generator, list]:
    """Single-stage baseline conditioned on reference, mask latent and force at once."""
    if cfg.mode != "hybrid":
        raise ValueError("hybrid baseline needs mode='hybrid'")
    if pairs.cond is None:
        raise TrainingError("hybrid training needs target-position mask latents")
    torch.manual_seed(derive_init_seed(seed, "hybrid"))
    model = DiT(cfg)
    curve = fit(model, pairs, schedule, tc, seed, tag="hybrid")
    return Generator(model, schedule, codec_fp, {"kind": "hybrid"}), curve


def train_separate_position(pairs: LatentPairs, cfg: DiTConfig, schedule: NoiseSchedule, tc: TrainConfig,
                            seed: int, codec_fp: str) -> tuple[Generator, list]:
    """Independent position generator fed with stage-1 outputs (``pairs.z_ref``) and mask latents."""
    if cfg.mode != "separate":
        raise ValueError("separate pipeline needs mode='separate'")
    if pairs.cond is None:
        raise TrainingError("separate training needs mask latents")
    torch.manual_seed(derive_init_seed(seed, "separate"))
    model = DiT(cfg)
    curve = fit(model, pairs, schedule, tc, seed, tag="separate")
    return Generator(model, schedule, codec_fp, {"kind": "separate"}), curve


def derive_init_seed(seed: int, tag: str) -> int:
    return derive_seed(seed, tag, "init") % (2 ** 31)
