"""Deterministic photometric renderer for a three-light gel sensor.

This is the ground-truth oracle for every experiment: a contact mask and a
force vector go in, a tactile image and the gel height map come out.

Height model: the mask's interior distance transform is Gaussian-smoothed,
normalised to a peak of 1, shifted laterally by the shear force and clipped to
the (dilated) mask support, then scaled by ``k_gel * fz``.  Shading is
Lambertian under three coloured lights, expressed relative to the flat gel so
that zero force reproduces the background exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .data import ForceVector


def _default_dirs() -> tuple:
    elev = np.deg2rad(30.0)
    out = []
    for az in (90.0, 210.0, 330.0):
        a = np.deg2rad(az)
        out.append((float(np.cos(elev) * np.cos(a)), float(np.cos(elev) * np.sin(a)), float(np.sin(elev))))
    return tuple(out)


@dataclass(frozen=True)
class SensorParams:
    h: int = 64
    w: int = 64
    light_dirs: tuple = field(default_factory=_default_dirs)
    # rows: per-light RGB intensity
    light_rgb: tuple = ((0.55, 0.08, 0.05), (0.05, 0.5, 0.1), (0.06, 0.1, 0.55))
    k_gel: float = 0.15  # mm per N at the contact centre
    k_shear: float = 1.5  # px per N of shear
    sigma_profile: float = 3.0  # px
    # converts mm of height per pixel into surface slope
    slope_gain: float = 3.0
    texture_seed: int = 0
    fz_max: float = 10.0

    def __post_init__(self):
        dirs = np.asarray(self.light_dirs, dtype=np.float64)
        if dirs.shape != (3, 3) or not np.allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-9):
            raise ValueError("light_dirs must be three unit vectors")
        if np.asarray(self.light_rgb).shape != (3, 3):
            raise ValueError("light_rgb must be 3x3")
        for name in ("k_gel", "k_shear", "sigma_profile", "slope_gain"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def render_background(params: SensorParams) -> np.ndarray:
    """Smooth, slightly coloured gel texture with vignetting, values in [0.27, 0.73]."""
    rng = np.random.default_rng(params.texture_seed)
    h, w = params.h, params.w
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    r2 = ((xs - (w - 1) / 2) / w) ** 2 + ((ys - (h - 1) / 2) / h) ** 2
    base = np.array([0.50, 0.52, 0.48]) + rng.uniform(-0.04, 0.04, size=3)
    img = np.empty((h, w, 3))
    for ch in range(3):
        noise = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=2.0, mode="wrap")
        noise /= noise.std() + 1e-12
        img[..., ch] = base[ch] + 0.04 * noise - 0.35 * r2
    return np.clip(img, 0.27, 0.73).astype(np.float32)


def contact_profile(mask: np.ndarray, shift: tuple[float, float], sigma: float) -> np.ndarray:
    """Unit-peak indentation profile of ``mask`` shifted by ``shift`` = (sx, sy) pixels."""
    mask = np.asarray(mask) > 0
    dist = ndimage.distance_transform_edt(mask)
    prof = ndimage.gaussian_filter(dist, sigma=sigma, mode="constant")
    peak = prof.max()
    if peak <= 0:
        return np.zeros(mask.shape)
    prof = prof / peak
    support = mask
    sx, sy = shift
    if sx or sy:
        prof = ndimage.shift(prof, (sy, sx), order=1, mode="constant", cval=0.0)
        reach = int(np.ceil(max(abs(sx), abs(sy))))
        if reach > 0:
            support = ndimage.binary_dilation(mask, iterations=reach)
    prof = np.where(support, prof, 0.0)
    return np.clip(prof, 0.0, None)


def shading(height: np.ndarray, params: SensorParams) -> np.ndarray:
    """Lambertian intensity change relative to a flat gel, (H, W, 3)."""
    gy, gx = np.gradient(height * params.slope_gain)
    norm = np.sqrt(1.0 + gx ** 2 + gy ** 2)
    nx, ny, nz = -gx / norm, -gy / norm, 1.0 / norm
    dirs = np.asarray(params.light_dirs)
    rgb = np.asarray(params.light_rgb)
    out = np.zeros(height.shape + (3,))
    for (lx, ly, lz), color in zip(dirs, rgb):
        lam = np.maximum(nx * lx + ny * ly + nz * lz, 0.0) - lz
        out += lam[..., None] * color[None, None, :]
    return out


def render(mask: np.ndarray, force: ForceVector, params: SensorParams,
           background: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Render ``(tactile image, height map in mm)`` for a contact.

    Raises ``ValueError`` for a normal force outside [0, fz_max] and for an
    empty mask with positive normal force (an inconsistent label).
    """
    mask = np.asarray(mask)
    if mask.shape != (params.h, params.w):
        raise ValueError(f"mask shape {mask.shape} does not match sensor {(params.h, params.w)}")
    if not (0.0 <= force.fz <= params.fz_max):
        raise ValueError(f"normal force {force.fz} N outside [0, {params.fz_max}]")
    if background is None:
        background = render_background(params)
    if force.fz == 0:
        return background.copy(), np.zeros(mask.shape, np.float32)
    if not mask.any():
        raise ValueError("empty contact mask with positive normal force")
    shift = (params.k_shear * force.fx, params.k_shear * force.fy)
    height = params.k_gel * force.fz * contact_profile(mask, shift, params.sigma_profile)
    img = np.clip(background.astype(np.float64) + shading(height, params), 0.0, 1.0)
    return img.astype(np.float32), height.astype(np.float32)
