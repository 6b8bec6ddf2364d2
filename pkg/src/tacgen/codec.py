"""Small convolutional autoencoder standing in for a pretrained latent codec.

The codec is trained once on background-subtracted tactile images (plus contact
masks broadcast to three channels) and then frozen.  ``encode`` returns latents
already multiplied by ``latent_scale`` so the diffusion model sees roughly unit
variance; ``decode`` undoes the scale and clamps to [0, 1].
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from . import data
from .metrics import ssim_many
from .utils import fingerprint, l1_mse_loss, log, make_optimizer, to_nchw, to_nhwc, torch_gen

WEIGHTS_VERSION = "tacgen-codec/1"
MIN_TRAIN_IMAGES = 500


class CodecError(RuntimeError):
    pass


@dataclass
class CodecConfig:
    factor: int = 4
    channels: int = 4
    width: int = 64
    steps: int = 3000
    batch: int = 32
    lr: float = 2e-3
    lr_min: float = 5e-5
    mask_fraction: float = 0.25
    ssim_gate: float = 0.90
    identity: bool = False

    def __post_init__(self):
        if not self.identity:
            if self.factor < 1 or (self.factor & (self.factor - 1)):
                raise ValueError("codec factor must be a power of two")
            if self.channels < 1:
                raise ValueError("latent channels must be >= 1")


class _Res(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(nn.SiLU(), nn.Conv2d(ch, ch, 3, padding=1), nn.SiLU(), nn.Conv2d(ch, ch, 3, padding=1))

    def forward(self, x):
        return x + self.body(x)


class ConvAutoencoder(nn.Module):
    """Space-to-depth conv autoencoder: all heavy convolutions run at latent resolution.

    A light full-resolution residual refiner follows the pixel-shuffle upsample.
    """

    def __init__(self, factor: int = 4, channels: int = 4, width: int = 64):
        super().__init__()
        fold = 3 * factor * factor
        self.encoder = nn.Sequential(
            nn.PixelUnshuffle(factor), nn.Conv2d(fold, width, 3, padding=1), _Res(width), _Res(width),
            nn.SiLU(), nn.Conv2d(width, channels, 1))
        self.decoder = nn.Sequential(
            nn.Conv2d(channels, width, 3, padding=1), _Res(width), _Res(width), nn.SiLU(),
            nn.Conv2d(width, fold, 3, padding=1), nn.PixelShuffle(factor), _Refine(3, 16))


class _Refine(nn.Module):
    def __init__(self, ch: int, hidden: int):
        super().__init__()
        self.body = nn.Sequential(nn.Conv2d(ch, hidden, 3, padding=1), nn.SiLU(), nn.Conv2d(hidden, ch, 3, padding=1))

    def forward(self, x):
        return x + self.body(x)


class Codec:
    """Frozen encoder/decoder pair; identity mode passes pixels through."""

    def __init__(self, config: CodecConfig, net: ConvAutoencoder | None = None, latent_scale: float = 1.0):
        self.config = config
        self.net = net
        self.latent_scale = float(latent_scale)
        if net is not None:
            net.eval()
            for p in net.parameters():
                p.requires_grad_(False)
        self._fp: str | None = None

    @classmethod
    def identity(cls) -> "Codec":
        return cls(CodecConfig(factor=1, channels=3, identity=True))

    @property
    def latent_channels(self) -> int:
        return 3 if self.config.identity else self.config.channels

    @property
    def factor(self) -> int:
        return 1 if self.config.identity else self.config.factor

    @property
    def fingerprint(self) -> str:
        if self._fp is None:
            state = {} if self.net is None else dict(self.net.state_dict())
            state["__latent_scale"] = torch.tensor(self.latent_scale, dtype=torch.float64)
            state["__identity"] = torch.tensor(int(self.config.identity))
            self._fp = fingerprint(state)
        return self._fp

    @staticmethod
    def _as_images(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, np.float32)
        if x.ndim == 2:
            x = x[None]
        if x.ndim == 3 and x.shape[-1] != 3:
            # stack of masks (N, H, W): broadcast to three channels
            x = np.repeat(x[..., None], 3, axis=-1)
        if x.ndim == 3:
            x = x[None]
        return x

    @torch.no_grad()
    def encode(self, x: np.ndarray) -> torch.Tensor:
        """Images (N, H, W, 3) in [0, 1] or masks (N, H, W) -> latents (N, c, h, w)."""
        imgs = self._as_images(x)
        t = (to_nchw(imgs) - 0.5) * 2.0
        if self.config.identity:
            return t
        if self.net is None:
            raise CodecError("codec weights not loaded")
        out = [self.net.encoder(t[i:i + 256]) for i in range(0, len(t), 256)]
        return torch.cat(out) * self.latent_scale

    @torch.no_grad()
    def decode(self, z: torch.Tensor) -> np.ndarray:
        if self.config.identity:
            y = z
        else:
            if self.net is None:
                raise CodecError("codec weights not loaded")
            zs = z / self.latent_scale
            y = torch.cat([self.net.decoder(zs[i:i + 256]) for i in range(0, len(zs), 256)])
        return np.clip(to_nhwc(y / 2.0 + 0.5), 0.0, 1.0)

    def save(self, path: os.PathLike) -> None:
        torch.save({
            "version": WEIGHTS_VERSION,
            "config": asdict(self.config),
            "latent_scale": self.latent_scale,
            "state": None if self.net is None else self.net.state_dict(),
            "fingerprint": self.fingerprint,
        }, path)

    @classmethod
    def load(cls, path: os.PathLike) -> "Codec":
        blob = torch.load(path, weights_only=False)
        if blob.get("version") != WEIGHTS_VERSION:
            raise CodecError(f"{path}: unsupported codec weights version {blob.get('version')!r}")
        cfg = CodecConfig(**blob["config"])
        net = None
        if blob["state"] is not None:
            net = ConvAutoencoder(cfg.factor, cfg.channels, cfg.width)
            net.load_state_dict(blob["state"])
        codec = cls(cfg, net, blob["latent_scale"])
        if codec.fingerprint != blob["fingerprint"]:
            raise CodecError(f"{path}: fingerprint mismatch")
        return codec


def fit_codec(train_images: np.ndarray, val_images: np.ndarray, train_masks: np.ndarray | None,
              config: CodecConfig, seed: int) -> tuple[Codec, dict]:
    """Train on in-memory background-subtracted images; returns (codec, stats).

    Raises ``CodecError`` when the validation SSIM misses ``config.ssim_gate``.
    """
    if config.identity:
        return Codec.identity(), {"val_ssim": 1.0, "val_loss": 0.0}
    if len(train_images) < MIN_TRAIN_IMAGES:
        raise CodecError(f"insufficient data: {len(train_images)} training images, need >= {MIN_TRAIN_IMAGES}")
    torch.manual_seed(seed)
    net = ConvAutoencoder(config.factor, config.channels, config.width)
    opt, sched = make_optimizer(net.parameters(), config.lr, config.lr_min, config.steps)
    xs = (to_nchw(train_images) - 0.5) * 2.0
    ms = None
    if train_masks is not None and len(train_masks) and config.mask_fraction > 0:
        ms = (to_nchw(np.repeat(np.asarray(train_masks, np.float32)[..., None], 3, -1)) - 0.5) * 2.0
    g = torch_gen(seed, "codec-batches")
    n_mask = int(round(config.batch * config.mask_fraction)) if ms is not None else 0
    net.train()
    for step in range(config.steps):
        idx = torch.randint(0, len(xs), (config.batch - n_mask,), generator=g)
        batch = xs[idx]
        if n_mask:
            batch = torch.cat([batch, ms[torch.randint(0, len(ms), (n_mask,), generator=g)]])
        recon = net.decoder(net.encoder(batch))
        loss = l1_mse_loss(recon, batch)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        if step % 500 == 0:
            log.info("codec step %d loss %.5f", step, loss.item())
    net.eval()
    with torch.no_grad():
        z = torch.cat([net.encoder(xs[i:i + 256]) for i in range(0, len(xs), 256)])
        scale = float(1.0 / z.std().clamp_min(1e-6))
    codec = Codec(config, net, scale)
    recon = codec.decode(codec.encode(val_images))
    val_ssim = float(ssim_many(recon, val_images).mean())
    val_loss = float(l1_mse_loss(torch.from_numpy(recon), torch.from_numpy(np.asarray(val_images, np.float32))))
    stats = {"val_ssim": val_ssim, "val_loss": val_loss, "latent_scale": scale}
    if val_ssim < config.ssim_gate:
        raise CodecError(f"codec did not converge: validation SSIM {val_ssim:.4f} < {config.ssim_gate}")
    return codec, stats


def train_codec(dataset: data.DatasetManifest, config: CodecConfig, seed: int) -> tuple[Codec, dict]:
    """Train the codec from a manifest's train/val splits (background removed)."""
    train = data.load_arrays(dataset, dataset.split("train"))
    val = data.load_arrays(dataset, dataset.split("val"))
    tr = np.stack([data.subtract_background(i, b) for i, b in zip(train.images, train.backgrounds)]) if len(train) else train.images
    va = np.stack([data.subtract_background(i, b) for i, b in zip(val.images, val.backgrounds)]) if len(val) else val.images
    if len(va) == 0:
        va = tr[: max(1, len(tr) // 10)]
    return fit_codec(tr, va, train.masks, config, seed)
