"""Image and regression metrics, error maps and the generation report."""

from __future__ import annotations

import csv
import os
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

_SIGMA = 1.5
_WINDOW = 11
_K1, _K2 = 0.01, 0.03

REPORT_FIELDS = ("model", "split", "n", "mse_mean", "mse_std", "ssim_mean", "ssim_std")
REPORT_SCHEMA_VERSION = 1


def _check(a: np.ndarray, b: np.ndarray) -> None:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"dimension mismatch: {np.shape(a)} vs {np.shape(b)}")


def pixel_mse(a: np.ndarray, b: np.ndarray, scale: float = 255.0) -> float:
    """Mean squared difference on the 0-255 scale (``scale`` configurable)."""
    _check(a, b)
    d = (np.asarray(a, np.float64) - np.asarray(b, np.float64)) * scale
    return float(np.mean(d * d))


def mae(pred: Sequence[float], gt: Sequence[float]) -> float:
    pred = np.asarray(pred, np.float64)
    gt = np.asarray(gt, np.float64)
    _check(pred, gt)
    return float(np.mean(np.abs(pred - gt)))


def gaussian_window(size: int = _WINDOW, sigma: float = _SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_batch(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0) -> torch.Tensor:
    """SSIM per image for batches shaped (N, C, H, W); 'valid' windows only."""
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    n, c, h, w = a.shape
    if h < _WINDOW or w < _WINDOW:
        raise ValueError(f"image {h}x{w} smaller than the {_WINDOW}x{_WINDOW} window")
    win = torch.as_tensor(gaussian_window(), dtype=a.dtype, device=a.device)
    win = win.expand(c, 1, _WINDOW, _WINDOW)
    c1 = (_K1 * data_range) ** 2
    c2 = (_K2 * data_range) ** 2

    def filt(x):
        return F.conv2d(x, win, groups=c)

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a ** 2
    sbb = filt(b * b) - mu_b ** 2
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return (num / den).mean(dim=(1, 2, 3))


def _as_nchw(x: np.ndarray) -> torch.Tensor:
    x = np.asarray(x, np.float64)
    if x.ndim == 2:
        x = x[..., None]
    if x.ndim == 3:
        x = x[None]
    return torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5), averaged over channels.

    Inputs are (H, W) or (H, W, C) arrays in [0, ``data_range``].
    """
    _check(a, b)
    return float(ssim_batch(_as_nchw(a), _as_nchw(b), data_range)[0])


def ssim_many(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-pair SSIM for stacks shaped (N, H, W, C)."""
    _check(a, b)
    out = []
    for i in range(0, len(a), 256):
        out.append(ssim_batch(_as_nchw(a[i:i + 256]), _as_nchw(b[i:i + 256])).numpy())
    return np.concatenate(out) if out else np.zeros(0)


def mse_many(a: np.ndarray, b: np.ndarray, scale: float = 255.0) -> np.ndarray:
    _check(a, b)
    d = (np.asarray(a, np.float64) - np.asarray(b, np.float64)) * scale
    return (d * d).reshape(len(d), -1).mean(axis=1)


# ------------------------------------------------------------------ error map


def _ramp() -> np.ndarray:
    """256-entry black -> red -> yellow -> white ramp; every channel nondecreasing."""
    t = np.arange(256) / 255.0
    r = np.clip(3 * t, 0, 1)
    g = np.clip(3 * t - 1, 0, 1)
    b = np.clip(3 * t - 2, 0, 1)
    return np.stack([r, g, b], axis=1).astype(np.float32)


ERROR_RAMP = _ramp()


def error_index(a: np.ndarray, b: np.ndarray, gain: float = 4.0) -> np.ndarray:
    """Per-pixel ramp index from the channel-mean absolute difference.

    ``gain`` stretches small errors; differences of 1/gain or more saturate.
    """
    _check(a, b)
    d = np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64))
    if d.ndim == 3:
        d = d.mean(axis=2)
    return np.clip(np.ceil(d * gain * 255.0), 0, 255).astype(np.int64)


def error_map(a: np.ndarray, b: np.ndarray, gain: float = 4.0) -> np.ndarray:
    return ERROR_RAMP[error_index(a, b, gain)]


# ---------------------------------------------------------------- reporting


def summarize(model: str, split: str, generated: np.ndarray, truth: np.ndarray) -> dict:
    mse = mse_many(generated, truth)
    ss = ssim_many(generated, truth)
    return {
        "model": model,
        "split": split,
        "n": int(len(mse)),
        "mse_mean": float(mse.mean()),
        "mse_std": float(mse.std()),
        "ssim_mean": float(ss.mean()),
        "ssim_std": float(ss.std()),
    }


def write_report(rows: list[dict], path: os.PathLike) -> None:
    """CSV with a fixed column order and rounded floats (byte-stable across reruns)."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# report-schema v{REPORT_SCHEMA_VERSION}\n")
        wr = csv.DictWriter(fh, fieldnames=list(REPORT_FIELDS), lineterminator="\n")
        wr.writeheader()
        for row in rows:
            wr.writerow({k: (f"{row[k]:.6f}" if isinstance(row[k], float) else row[k]) for k in REPORT_FIELDS})


def read_report(path: os.PathLike) -> list[dict]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    for r in rows:
        r["n"] = int(r["n"])
        for k in REPORT_FIELDS[3:]:
            r[k] = float(r[k])
    return rows


def contact_centroid(image: np.ndarray, background: np.ndarray, threshold: float = 0.02) -> tuple[float, float]:
    """Intensity-weighted centre (x, y) of the contact-induced change; NaN when nothing exceeds ``threshold``."""
    _check(image, background)
    d = np.abs(np.asarray(image, np.float64) - np.asarray(background, np.float64))
    if d.ndim == 3:
        d = d.mean(axis=2)
    w = np.where(d > threshold, d, 0.0)
    total = w.sum()
    if total == 0:
        return float("nan"), float("nan")
    ys, xs = np.indices(w.shape)
    return float((w * xs).sum() / total), float((w * ys).sum() / total)
