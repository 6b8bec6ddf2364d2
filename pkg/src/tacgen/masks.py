"""Contact-mask geometry on the integer pixel / integer degree grid.

Rotation is about the geometric image centre ((W-1)/2, (H-1)/2) and uses
nearest-neighbour sampling so masks stay strictly binary.  A positive angle
rotates a point (x, y) to (c + cos*(x-c) - sin*(y-c), c + sin*(x-c) + cos*(y-c))
in column/row coordinates; :func:`pose_from_transform` uses the same formula so
labels track the pixels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import ContactPose, canonical_angle


@dataclass(frozen=True)
class MaskTransform:
    dx: int = 0
    dy: int = 0
    dtheta: int = 0

    def __post_init__(self):
        for name in ("dx", "dy", "dtheta"):
            if int(getattr(self, name)) != getattr(self, name):
                raise ValueError(f"{name} must be an integer, got {getattr(self, name)!r}")
        if not -360 < self.dtheta < 360:
            raise ValueError(f"dtheta {self.dtheta} outside (-360, 360)")

    def check_frame(self, h: int, w: int) -> None:
        if abs(self.dx) >= w or abs(self.dy) >= h:
            raise ValueError(f"translation ({self.dx}, {self.dy}) exceeds frame {w}x{h}")


IDENTITY = MaskTransform(0, 0, 0)


def _cos_sin(deg: int) -> tuple[float, float]:
    d = int(deg) % 360
    exact = {0: (1.0, 0.0), 90: (0.0, 1.0), 180: (-1.0, 0.0), 270: (0.0, -1.0)}
    if d in exact:
        return exact[d]
    r = np.deg2rad(d)
    return float(np.cos(r)), float(np.sin(r))


def rotate_point(x: float, y: float, deg: int, h: int, w: int) -> tuple[float, float]:
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    c, s = _cos_sin(deg)
    return cx + c * (x - cx) - s * (y - cy), cy + s * (x - cx) + c * (y - cy)


def transform_mask(mask: np.ndarray, t: MaskTransform) -> np.ndarray:
    """Rotate ``mask`` about the image centre by ``t.dtheta``, then shift by (dx, dy).

    Pixels whose source falls outside the frame become 0 (silent clipping).
    """
    mask = np.asarray(mask)
    h, w = mask.shape
    t.check_frame(h, w)
    if t == IDENTITY:
        return (mask > 0).astype(np.uint8)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse map: undo translation, then undo rotation
    px, py = xs - t.dx, ys - t.dy
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    c, s = _cos_sin(t.dtheta)
    sx = cx + c * (px - cx) + s * (py - cy)
    sy = cy - s * (px - cx) + c * (py - cy)
    ix = np.floor(sx + 0.5).astype(np.int64)
    iy = np.floor(sy + 0.5).astype(np.int64)
    valid = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
    out = np.zeros((h, w), np.uint8)
    out[valid] = mask[iy[valid], ix[valid]] > 0
    return out


def pose_from_transform(pose: ContactPose, t: MaskTransform, h: int = 64, w: int = 64,
                        period: float = 360.0) -> ContactPose:
    """Label of a contact after applying ``t`` to the mask it came from.

    Raises ``ValueError`` when the transformed centre leaves the frame; such a
    sample should be dropped rather than mislabelled.
    """
    x, y = rotate_point(pose.cx, pose.cy, t.dtheta, h, w)
    x, y = x + t.dx, y + t.dy
    if not (0 <= x < w and 0 <= y < h):
        raise ValueError(f"transformed contact centre ({x:.2f}, {y:.2f}) is off-frame")
    theta = float(np.mod(pose.theta + t.dtheta, 360.0))
    return ContactPose(float(x), float(y), canonical_angle(theta, period))


def centroid_of_mask(mask: np.ndarray) -> tuple[int, int]:
    ys, xs = np.nonzero(np.asarray(mask))
    if xs.size == 0:
        raise ValueError("centroid of an empty mask is undefined")
    return int(np.floor(xs.mean() + 0.5)), int(np.floor(ys.mean() + 0.5))


# ------------------------------------------------------------ prototypes

# object id -> rotational symmetry period in degrees (0 = fully symmetric)
OBJECT_SYMMETRY = {
    "cyl_thin": 180.0,
    "cyl_mid": 180.0,
    "cyl_wide": 180.0,
    "cross": 90.0,
    "sphere": 0.0,
    "tshape": 360.0,
}
OBJECTS = tuple(OBJECT_SYMMETRY)


def _bar(h: int, w: int, length: float, width: float, cx: float, cy: float, vertical: bool = False) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    along, across = (ys - cy, xs - cx) if vertical else (xs - cx, ys - cy)
    return ((np.abs(along) <= length / 2.0) & (np.abs(across) <= width / 2.0)).astype(np.uint8)


def prototype_mask(object_id: str, h: int = 64, w: int = 64) -> np.ndarray:
    """Canonical contact mask of a desk object, centred on the image, angle 0.

    Sizes are fractions of the frame so the prototypes scale with the sensor.
    """
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    u = min(h, w) / 64.0
    if object_id.startswith("cyl_"):
        width = {"cyl_thin": 5, "cyl_mid": 8, "cyl_wide": 11}[object_id] * u
        return _bar(h, w, 34 * u, width, cx, cy)
    if object_id == "cross":
        return _bar(h, w, 28 * u, 7 * u, cx, cy) | _bar(h, w, 28 * u, 7 * u, cx, cy, vertical=True)
    if object_id == "sphere":
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        return (((xs - cx) ** 2 + (ys - cy) ** 2) <= (9.5 * u) ** 2).astype(np.uint8)
    if object_id == "tshape":
        # top bar and stem; the pose centre is the image centre, on the stem
        top = _bar(h, w, 26 * u, 7 * u, cx, cy - 8 * u)
        stem = _bar(h, w, 20 * u, 7 * u, cx, cy + 2 * u, vertical=True)
        return top | stem
    raise KeyError(f"unknown object prototype {object_id!r}")


def canonical_pose(h: int = 64, w: int = 64) -> ContactPose:
    return ContactPose((w - 1) / 2.0, (h - 1) / 2.0, 0.0)


def mask_for_pose(object_id: str, t: MaskTransform, h: int = 64, w: int = 64,
                  proto: Optional[np.ndarray] = None) -> np.ndarray:
    if proto is None:
        proto = prototype_mask(object_id, h, w)
    return transform_mask(proto, t)
