"""Downstream models trained on real and generated tactile data.

* force estimator: patch transformer, 3-D force head plus an auxiliary height decoder
* pose estimator: same encoder, (cx, cy, sin, cos) head plus a mask decoder
* object classifiers: a four-block CNN and a small patch transformer

Traditional (geometric / colour) augmentation lives here too since it only
feeds the classifier comparison.
"""

from __future__ import annotations

import itertools
import os
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import cv2
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import data
from .data import ContactPose, ForceVector
from .utils import derive_seed, log, make_optimizer, to_nchw, torch_gen

TASKS = ("force", "pose", "classify")
WEIGHTS_VERSION = "tacgen-estimator/1"


class EstimatorError(RuntimeError):
    pass


@dataclass
class EstimatorConfig:
    task: str = "force"
    kind: str = "vit"  # vit | cnn (cnn only for classification)
    dim: int = 64
    depth: int = 2
    heads: int = 4
    steps: int = 3000
    batch: int = 32
    lr: float = 1e-3
    lr_min: float = 1e-5
    weight_decay: float = 1e-4
    aux_weight: float = 0.5
    angle_mode: str = "sincos"  # sincos | degrees
    n_classes: int = 0
    dropout: float = 0.5

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.kind not in ("vit", "cnn"):
            raise ValueError("kind must be 'vit' or 'cnn'")
        if self.angle_mode not in ("sincos", "degrees"):
            raise ValueError("angle_mode must be 'sincos' or 'degrees'")


def head_width(cfg: EstimatorConfig) -> int:
    if cfg.task == "force":
        return 3
    if cfg.task == "pose":
        return 4 if cfg.angle_mode == "sincos" else 3
    return cfg.n_classes


# -------------------------------------------------------------------- models


class PatchEncoder(nn.Module):
    """4x4 patchify stem, 2x2 merge to an 8x8 token grid, pre-norm transformer."""

    def __init__(self, dim: int = 64, depth: int = 2, heads: int = 4, size: int = 64):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(3, dim // 2, 4, stride=4), nn.GELU(), nn.Conv2d(dim // 2, dim, 2, stride=2))
        self.side = size // 8
        self.pos = nn.Parameter(torch.zeros(1, self.side * self.side, dim))
        nn.init.normal_(self.pos, std=0.02)
        layer = nn.TransformerEncoderLayer(dim, heads, 2 * dim, dropout=0.0, activation="gelu",
                                           batch_first=True, norm_first=True)
        self.blocks = nn.TransformerEncoder(layer, depth, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        h = self.stem(x).flatten(2).transpose(1, 2) + self.pos
        return self.norm(self.blocks(h))


class TokenDecoder(nn.Module):
    """Auxiliary dense decoder: each token predicts its 8x8 pixel patch of one channel."""

    def __init__(self, dim: int, side: int, patch: int = 8):
        super().__init__()
        self.side, self.patch = side, patch
        self.lin = nn.Linear(dim, patch * patch)

    def forward(self, tokens):
        b = tokens.shape[0]
        s, p = self.side, self.patch
        x = self.lin(tokens).view(b, s, s, p, p)
        return x.permute(0, 1, 3, 2, 4).reshape(b, s * p, s * p)


class Regressor(nn.Module):
    def __init__(self, cfg: EstimatorConfig, size: int = 64):
        super().__init__()
        self.encoder = PatchEncoder(cfg.dim, cfg.depth, cfg.heads, size)
        # the head reads the whole token grid so spatial layout survives pooling
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(cfg.dim * (size // 8) ** 2, 2 * cfg.dim), nn.GELU(),
                                  nn.Linear(2 * cfg.dim, head_width(cfg)))
        self.decoder = TokenDecoder(cfg.dim, size // 8)

    def forward(self, x, with_aux: bool = False):
        tok = self.encoder(x)
        out = self.head(tok)
        return (out, self.decoder(tok)) if with_aux else out


class CNNClassifier(nn.Module):
    """Four conv blocks (BN, ReLU, 2x2 max-pool) then two fully connected layers."""

    def __init__(self, n_classes: int, size: int = 224, dropout: float = 0.5):
        super().__init__()
        chans = [3, 32, 64, 128, 256]
        blocks = []
        for a, b in zip(chans[:-1], chans[1:]):
            blocks += [nn.Conv2d(a, b, 3, padding=1), nn.BatchNorm2d(b), nn.ReLU(), nn.MaxPool2d(2)]
        self.features = nn.Sequential(*blocks)
        self.flat = 256 * (size // 16) ** 2
        self.classifier = nn.Sequential(nn.Flatten(), nn.Linear(self.flat, 512), nn.ReLU(), nn.Dropout(dropout),
                                        nn.Linear(512, n_classes))

    def forward(self, x):
        return self.classifier(self.features(x))


class PatchClassifier(nn.Module):
    def __init__(self, cfg: EstimatorConfig, size: int = 64):
        super().__init__()
        self.encoder = PatchEncoder(cfg.dim, cfg.depth, cfg.heads, size)
        self.head = nn.Linear(cfg.dim, cfg.n_classes)

    def forward(self, x):
        return self.head(self.encoder(x).mean(1))


def build_model(cfg: EstimatorConfig, size: int = 64) -> nn.Module:
    if cfg.task == "classify":
        if cfg.n_classes < 2:
            raise EstimatorError("classification needs at least two classes")
        return CNNClassifier(cfg.n_classes, size, cfg.dropout) if cfg.kind == "cnn" else PatchClassifier(cfg, size)
    if cfg.kind != "vit":
        raise ValueError("force/pose estimators use the patch-transformer encoder")
    return Regressor(cfg, size)


@dataclass
class EstimatorWeights:
    config: EstimatorConfig
    model: nn.Module
    size: int = 64
    meta: dict = field(default_factory=dict)

    @property
    def task(self) -> str:
        return self.config.task

    def require(self, task: str) -> None:
        if self.config.task != task:
            raise EstimatorError(f"task mismatch: weights are for {self.config.task!r}, called as {task!r}")

    def save(self, path: os.PathLike) -> None:
        torch.save({"version": WEIGHTS_VERSION, "config": asdict(self.config), "size": self.size,
                    "state": self.model.state_dict(), "meta": self.meta}, path)

    @classmethod
    def load(cls, path: os.PathLike) -> "EstimatorWeights":
        blob = torch.load(path, weights_only=False)
        if blob.get("version") != WEIGHTS_VERSION:
            raise EstimatorError(f"{path}: unsupported estimator weights version")
        cfg = EstimatorConfig(**blob["config"])
        model = build_model(cfg, blob["size"])
        model.load_state_dict(blob["state"])
        model.eval()
        return cls(cfg, model, blob["size"], blob.get("meta", {}))


# --------------------------------------------------------------- training data


@dataclass
class TrainSet:
    """In-memory supervised examples.  Missing height maps / masks are NaN / None."""

    images: np.ndarray
    forces: Optional[np.ndarray] = None  # (N, 3) N
    heights: Optional[np.ndarray] = None  # (N, H, W) mm, NaN where absent
    poses: Optional[np.ndarray] = None  # (N, 3) px, px, deg
    periods: Optional[np.ndarray] = None  # (N,) symmetry period per sample
    masks: Optional[np.ndarray] = None  # (N, H, W) in {0, 1}
    labels: Optional[np.ndarray] = None  # (N,) class ids

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def concat(cls, parts: Sequence["TrainSet"]) -> "TrainSet":
        def cat(name):
            vals = [getattr(p, name) for p in parts]
            if any(v is None for v in vals):
                if name == "heights":
                    vals = [p.heights if p.heights is not None else
                            np.full(p.images.shape[:3], np.nan, np.float32) for p in parts]
                else:
                    return None
            return np.concatenate(vals)
        return cls(**{k: cat(k) for k in ("images", "forces", "heights", "poses", "periods", "masks", "labels")})


def trainset_from_manifest(manifest: data.DatasetManifest, split: str | None = None,
                           labels: dict | None = None) -> TrainSet:
    recs = manifest.samples if split is None else manifest.split(split)
    arr = data.load_arrays(manifest, recs)
    periods = np.array([manifest.period(r.object_id) for r in recs], np.float64)
    lab = None if labels is None else np.array([labels[r.object_id] for r in recs], np.int64)
    return TrainSet(arr.images, arr.forces, arr.heights, arr.poses, periods, arr.masks, lab)


def _x(images: np.ndarray) -> torch.Tensor:
    return (to_nchw(images) - 0.5) * 2.0


def _angle_target(theta_deg: np.ndarray, periods: np.ndarray) -> np.ndarray:
    per = np.where(periods > 0, periods, 360.0)
    phi = 2 * np.pi * np.asarray(theta_deg, np.float64) / per
    return np.stack([np.sin(phi), np.cos(phi)], -1)


def _pose_targets(ts: TrainSet, cfg: EstimatorConfig, size: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Normalised pose targets and a per-sample angle weight (zero for fully symmetric objects)."""
    if ts.poses is None or np.isnan(ts.poses).any():
        raise EstimatorError("missing pose labels")
    periods = ts.periods if ts.periods is not None else np.full(len(ts), 360.0)
    centre = ts.poses[:, :2] / size
    if cfg.angle_mode == "sincos":
        ang = _angle_target(ts.poses[:, 2], periods)
    else:
        ang = (ts.poses[:, 2:3] / 360.0)
    w = (periods > 0).astype(np.float32)
    return torch.from_numpy(np.concatenate([centre, ang], 1).astype(np.float32)), torch.from_numpy(w)


def _fit(model: nn.Module, cfg: EstimatorConfig, n: int, loss_fn, seed: int, tag: str) -> list:
    opt, sched = make_optimizer(model.parameters(), cfg.lr, cfg.lr_min, cfg.steps, cfg.weight_decay)
    model.train()
    curve = []
    run = 0.0
    for step in range(cfg.steps):
        g = torch_gen(seed, tag, step)
        idx = torch.randint(0, n, (min(cfg.batch, n),), generator=g)
        loss = loss_fn(idx)
        if not torch.isfinite(loss):
            raise EstimatorError(f"{tag}: non-finite loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        run += loss.item()
        if (step + 1) % 100 == 0 or step == cfg.steps - 1:
            curve.append((step + 1, run / ((step % 100) + 1)))
            run = 0.0
            if (step + 1) % 1000 == 0:
                log.info("%s step %d loss %.4f", tag, step + 1, curve[-1][1])
    model.eval()
    return curve


def train_force_estimator(ts: TrainSet, cfg: EstimatorConfig, seed: int) -> EstimatorWeights:
    """Loss: MAE on the force vector + aux_weight * MSE on height maps where present."""
    if cfg.task != "force":
        raise ValueError("config task must be 'force'")
    if ts.forces is None or np.isnan(ts.forces).any():
        raise EstimatorError("no force labels")
    size = ts.images.shape[1]
    torch.manual_seed(derive_seed(seed, "force-init") % 2 ** 31)
    model = build_model(cfg, size)
    x = _x(ts.images)
    y = torch.from_numpy(np.asarray(ts.forces, np.float32))
    hm = None
    if cfg.aux_weight > 0 and ts.heights is not None:
        hm = torch.from_numpy(np.nan_to_num(ts.heights, nan=0.0).astype(np.float32))
        has = torch.from_numpy(~np.isnan(ts.heights).any(axis=(1, 2)))

    def loss_fn(idx):
        pred, dec = model(x[idx], with_aux=True)
        loss = F.l1_loss(pred, y[idx])
        if hm is not None:
            sel = has[idx]
            if sel.any():
                loss = loss + cfg.aux_weight * F.mse_loss(dec[sel], hm[idx][sel])
        return loss

    curve = _fit(model, cfg, len(ts), loss_fn, seed, "force-est")
    return EstimatorWeights(cfg, model, size, {"curve": curve})


def train_pose_estimator(ts: TrainSet, cfg: EstimatorConfig, seed: int) -> EstimatorWeights:
    """Loss: L1 on the centre (in units of 1/8 frame) + chord length on the angle code + aux mask MSE.

    The chord between unit vectors grows linearly with the angle error, so small errors keep a useful
    gradient (the squared error flattens out near the optimum).
    """
    if cfg.task != "pose":
        raise ValueError("config task must be 'pose'")
    size = ts.images.shape[1]
    tgt, ang_w = _pose_targets(ts, cfg, size)
    torch.manual_seed(derive_seed(seed, "pose-init") % 2 ** 31)
    model = build_model(cfg, size)
    x = _x(ts.images)
    mk = None if ts.masks is None or cfg.aux_weight <= 0 else torch.from_numpy(np.asarray(ts.masks, np.float32))

    def loss_fn(idx):
        pred, dec = model(x[idx], with_aux=True)
        t = tgt[idx]
        loss = 8.0 * F.l1_loss(pred[:, :2], t[:, :2])
        a_err = ((pred[:, 2:] - t[:, 2:]).square().sum(1) + 1e-8).sqrt()
        loss = loss + 8.0 * (ang_w[idx] * a_err).mean()
        if mk is not None:
            loss = loss + cfg.aux_weight * F.mse_loss(dec, mk[idx])
        return loss

    curve = _fit(model, cfg, len(ts), loss_fn, seed, "pose-est")
    return EstimatorWeights(cfg, model, size, {"curve": curve})


@torch.no_grad()
def _forward(w: EstimatorWeights, images: np.ndarray, batch: int = 256) -> torch.Tensor:
    w.model.eval()
    imgs = np.asarray(images, np.float32)
    if imgs.ndim == 3:
        imgs = imgs[None]
    return torch.cat([w.model(_x(imgs[i:i + batch])) for i in range(0, len(imgs), batch)])


def predict_forces(w: EstimatorWeights, images: np.ndarray) -> np.ndarray:
    w.require("force")
    out = _forward(w, images).numpy().astype(np.float64)
    if not np.isfinite(out).all():
        raise EstimatorError("non-finite force prediction")
    return out


def predict_force(w: EstimatorWeights, image: np.ndarray) -> ForceVector:
    return ForceVector.from_seq(predict_forces(w, image)[0])


def predict_poses(w: EstimatorWeights, images: np.ndarray, periods) -> np.ndarray:
    """(N, 3) array of (cx, cy, theta) with theta canonicalised per object period."""
    w.require("pose")
    out = _forward(w, images).numpy().astype(np.float64)
    periods = np.broadcast_to(np.asarray(periods, np.float64), (len(out),))
    centre = out[:, :2] * w.size
    if w.config.angle_mode == "sincos":
        phi = np.arctan2(out[:, 2], out[:, 3])
        per = np.where(periods > 0, periods, 360.0)
        theta = np.mod(phi, 2 * np.pi) * per / (2 * np.pi)
    else:
        theta = out[:, 2] * 360.0
    theta = np.array([data.canonical_angle(t, p) for t, p in zip(theta, periods)])
    return np.concatenate([centre, theta[:, None]], 1)


def predict_pose(w: EstimatorWeights, image: np.ndarray, period: float = 360.0) -> ContactPose:
    cx, cy, th = predict_poses(w, image, period)[0]
    return ContactPose(float(cx), float(cy), float(th))


def pose_errors(pred: np.ndarray, truth: np.ndarray, periods) -> tuple[float, float]:
    """Mean Euclidean centre error (px) and mean symmetry-aware angle error (deg)."""
    periods = np.broadcast_to(np.asarray(periods, np.float64), (len(pred),))
    centre = float(np.mean(np.hypot(pred[:, 0] - truth[:, 0], pred[:, 1] - truth[:, 1])))
    ang = [data.angle_error(a, b, p) for a, b, p in zip(pred[:, 2], truth[:, 2], periods) if p > 0]
    return centre, float(np.mean(ang)) if ang else 0.0


# -------------------------------------------------------------- classifiers


def train_classifier(kind: str, ts: TrainSet, cfg: EstimatorConfig, seed: int) -> EstimatorWeights:
    if ts.labels is None:
        raise EstimatorError("missing class labels")
    n_classes = int(ts.labels.max()) + 1
    if len(np.unique(ts.labels)) < 2:
        raise EstimatorError("classification needs at least two classes")
    cfg = EstimatorConfig(**{**asdict(cfg), "task": "classify", "kind": kind, "n_classes": n_classes})
    size = ts.images.shape[1]
    torch.manual_seed(derive_seed(seed, "cls-init", kind) % 2 ** 31)
    model = build_model(cfg, size)
    x = _x(ts.images)
    y = torch.from_numpy(np.asarray(ts.labels, np.int64))

    def loss_fn(idx):
        return F.cross_entropy(model(x[idx]), y[idx])

    curve = _fit(model, cfg, len(ts), loss_fn, seed, f"cls-{kind}")
    return EstimatorWeights(cfg, model, size, {"curve": curve})


def classify_batch(w: EstimatorWeights, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    w.require("classify")
    scores = torch.softmax(_forward(w, images).double(), dim=-1).numpy()
    return scores.argmax(1), scores


def classify(w: EstimatorWeights, image: np.ndarray) -> tuple[int, np.ndarray]:
    ids, scores = classify_batch(w, image)
    return int(ids[0]), scores[0]


def accuracy(w: EstimatorWeights, images: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    if labels.max() >= w.config.n_classes:
        raise EstimatorError("class mismatch between training and evaluation labels")
    return float((classify_batch(w, images)[0] == labels).mean())


# ---------------------------------------------------- traditional augmentation

ROTATIONS = tuple(range(0, 360, 45))
FLIPS = ("none", "vertical", "horizontal", "both")
SCALES = (0.8, 1.0, 1.2)
SHIFTS = (-20, 0, 20)
HUE_SHIFTS = tuple(range(0, 360, 60))


@dataclass(frozen=True)
class Variant:
    rotation: int = 0
    flip: str = "none"
    scale: float = 1.0
    tx: int = 0
    ty: int = 0
    hue: int = 0


def traditional_variants(mode: str) -> list[Variant]:
    """Full enumeration: 8 rotations x 4 flips x 3 scales x 9 shifts (x 6 hues with colour)."""
    if mode not in ("geometric", "geometric+color"):
        raise ValueError("mode must be 'geometric' or 'geometric+color'")
    hues = HUE_SHIFTS if mode == "geometric+color" else (0,)
    return [Variant(r, f, s, tx, ty, h) for r, f, s, tx, ty, h in
            itertools.product(ROTATIONS, FLIPS, SCALES, SHIFTS, SHIFTS, hues)]


def apply_variant(img: np.ndarray, background: np.ndarray, v: Variant) -> np.ndarray:
    """Warp the contact pattern (background held fixed) and optionally rotate hue."""
    img = np.asarray(img, np.float32)
    if v == Variant():
        return img.copy()
    diff = data.subtract_background(img, background)
    if v.flip in ("vertical", "both"):
        diff = diff[::-1]
    if v.flip in ("horizontal", "both"):
        diff = diff[:, ::-1]
    diff = np.ascontiguousarray(diff)
    h, w = diff.shape[:2]
    m = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), float(v.rotation), float(v.scale))
    m[:, 2] += (v.tx, v.ty)
    diff = cv2.warpAffine(diff, m, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT,
                          borderValue=(0.5, 0.5, 0.5))
    out = data.add_background(diff, background)
    if v.hue:
        hsv = cv2.cvtColor(out, cv2.COLOR_RGB2HSV)
        hsv[..., 0] = np.mod(hsv[..., 0] + v.hue, 360.0)
        out = np.clip(cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB), 0.0, 1.0)
    return out.astype(np.float32)


def traditional_augment(refs: np.ndarray, backgrounds: np.ndarray, labels: Sequence[int], mode: str, seed: int,
                        n_per_class: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Augment one reference per class; optionally subsample ``n_per_class`` variants each.

    Returns (images, labels).  Without subsampling every class yields the full
    enumeration (864 geometric, 5184 with colour).
    """
    variants = traditional_variants(mode)
    if len(set(labels)) != len(labels):
        raise ValueError("expected one reference per class")
    bgs = np.broadcast_to(np.asarray(backgrounds, np.float32), np.shape(refs))
    imgs, labs = [], []
    for ref, bg, lab in zip(refs, bgs, labels):
        chosen = variants
        if n_per_class is not None:
            if n_per_class > len(variants):
                raise ValueError(f"only {len(variants)} variants per class")
            rng = np.random.default_rng(derive_seed(seed, "trad", mode, lab))
            chosen = [variants[i] for i in sorted(rng.choice(len(variants), n_per_class, replace=False))]
        for v in chosen:
            imgs.append(apply_variant(ref, bg, v))
            labs.append(lab)
    return np.stack(imgs), np.asarray(labs, np.int64)


def cnn_flatten_width(size: int) -> int:
    """Width of the flattened CNN feature map for a square input of ``size`` pixels."""
    net = CNNClassifier(2, size)
    with torch.no_grad():
        return int(net.features(torch.zeros(1, 3, size, size)).flatten(1).shape[1])


def mae_by_axis(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    return np.abs(np.asarray(pred) - np.asarray(truth)).mean(0)
