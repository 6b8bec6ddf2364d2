"""Domain types, image IO and the on-disk dataset manifest.

Images live in memory as float32 arrays in [0, 1] with shape (H, W, 3);
masks as uint8 arrays of {0, 1} with shape (H, W); height maps as float32
millimetres with shape (H, W).  On disk a dataset is one ``manifest.json``
next to PNG files (8-bit RGB images, 8-bit grayscale masks, 16-bit grayscale
height maps scaled by ``sensor.height_scale`` mm per count).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

SPLITS = ("train", "val", "test")
PROVENANCES = ("real", "synthetic", "generated")
MANIFEST_VERSION = 1


class ManifestError(ValueError):
    """Raised for any manifest validation failure; message names the sample."""


@dataclass(frozen=True)
class SensorConfig:
    h: int = 64
    w: int = 64
    # Recorded for bookkeeping only; no algorithm reads it.
    mm_per_px: float = 1.0 / 20.0
    # Millimetres per count in 16-bit height-map PNGs.
    height_scale: float = 1e-4


@dataclass(frozen=True)
class ForceVector:
    """Contact force in Newtons: two shear components and the normal."""

    fx: float
    fy: float
    fz: float

    def __sub__(self, other: "ForceVector") -> "ForceVector":
        return ForceVector(self.fx - other.fx, self.fy - other.fy, self.fz - other.fz)

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.fz], dtype=np.float64)

    @classmethod
    def from_seq(cls, values: Sequence[float]) -> "ForceVector":
        fx, fy, fz = (float(v) for v in values)
        return cls(fx, fy, fz)


@dataclass(frozen=True)
class ContactPose:
    """Contact centre in pixels (column ``cx``, row ``cy``) and angle in degrees."""

    cx: float
    cy: float
    theta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.theta], dtype=np.float64)


def canonical_angle(theta: float, period: float) -> float:
    """Reduce ``theta`` modulo the object's rotational symmetry period.

    ``period`` is 360 for asymmetric objects, 180 for two-fold symmetry, 90 for
    four-fold, and 0 for full rotational symmetry (angle carries no information
    and is mapped to 0).
    """
    if period <= 0:
        return 0.0
    out = float(np.mod(theta, period))
    # np.mod can return `period` itself for tiny negative inputs
    return 0.0 if out >= period else out


def angle_error(a: float, b: float, period: float) -> float:
    """Smallest absolute angular difference modulo the symmetry period."""
    if period <= 0:
        return 0.0
    d = float(np.mod(a - b, period))
    return min(d, period - d)


@dataclass(frozen=True)
class SampleRecord:
    id: str
    image: str
    background: str
    mask: Optional[str]
    height: Optional[str]
    force: ForceVector
    pose: ContactPose
    object_id: str
    split: str
    provenance: str

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "image": self.image,
            "background": self.background,
            "mask": self.mask,
            "height": self.height,
            "force": [self.force.fx, self.force.fy, self.force.fz],
            "pose": [self.pose.cx, self.pose.cy, self.pose.theta],
            "object_id": self.object_id,
            "split": self.split,
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SampleRecord":
        return cls(
            id=str(d["id"]),
            image=d["image"],
            background=d["background"],
            mask=d.get("mask"),
            height=d.get("height"),
            force=ForceVector.from_seq(d["force"]),
            pose=ContactPose(*(float(v) for v in d["pose"])),
            object_id=str(d["object_id"]),
            split=d["split"],
            provenance=d["provenance"],
        )


@dataclass
class DatasetManifest:
    sensor: SensorConfig = field(default_factory=SensorConfig)
    seed: int = 0
    samples: list[SampleRecord] = field(default_factory=list)
    # object_id -> rotational symmetry period in degrees (see canonical_angle)
    objects: dict[str, float] = field(default_factory=dict)
    # Directory that relative file references resolve against.
    root: Optional[Path] = None

    def __len__(self) -> int:
        return len(self.samples)

    def split(self, name: str) -> list[SampleRecord]:
        return [s for s in self.samples if s.split == name]

    def resolve(self, ref: str) -> Path:
        p = Path(ref)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    def period(self, object_id: str) -> float:
        return float(self.objects.get(object_id, 360.0))

    def to_json(self) -> dict:
        s = self.sensor
        return {
            "version": MANIFEST_VERSION,
            "sensor": {"h": s.h, "w": s.w, "mm_per_px": s.mm_per_px, "height_scale": s.height_scale},
            "seed": self.seed,
            "objects": {k: self.objects[k] for k in sorted(self.objects)},
            "samples": [r.to_json() for r in self.samples],
        }

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return self.to_json() == other.to_json()


# ---------------------------------------------------------------- image IO


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_image(path: os.PathLike, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img), mode="RGB").save(path, optimize=False)


def load_image(path: os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / np.float32(255.0)


def save_mask(path: os.PathLike, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def load_mask(path: os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr >= 128).astype(np.uint8)


def save_height(path: os.PathLike, height: np.ndarray, scale: float) -> None:
    counts = np.clip(np.floor(np.asarray(height, dtype=np.float64) / scale + 0.5), 0, 65535)
    Image.fromarray(counts.astype(np.uint16)).save(path)


def load_height(path: os.PathLike, scale: float) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64)
    return (arr * scale).astype(np.float32)


def _png_size(path: Path) -> tuple[int, int]:
    with Image.open(path) as im:
        w, h = im.size
    return h, w


# ------------------------------------------------------------ manifest IO


def _validate(manifest: DatasetManifest, check_files: bool) -> None:
    seen: set[str] = set()
    per_split: dict[str, set[str]] = {}
    sensor = manifest.sensor
    for rec in manifest.samples:
        if rec.id in seen:
            raise ManifestError(f"duplicate sample id {rec.id!r}")
        seen.add(rec.id)
        if rec.split not in SPLITS:
            raise ManifestError(f"sample {rec.id!r}: unknown split {rec.split!r}")
        if rec.provenance not in PROVENANCES:
            raise ManifestError(f"sample {rec.id!r}: unknown provenance {rec.provenance!r}")
        if rec.provenance == "synthetic" and rec.height is None:
            raise ManifestError(f"sample {rec.id!r}: synthetic sample without height map")
        if rec.provenance == "generated" and rec.height is not None:
            raise ManifestError(f"sample {rec.id!r}: generated sample must not carry a height map")
        if not (0.0 <= rec.force.fz <= 10.0):
            raise ManifestError(f"sample {rec.id!r}: normal force {rec.force.fz} outside [0, 10] N")
        if not (0 <= rec.pose.cx < sensor.w and 0 <= rec.pose.cy < sensor.h):
            raise ManifestError(f"sample {rec.id!r}: contact centre off-frame")
        per_split.setdefault(rec.split, set()).add(rec.object_id)
        if check_files:
            for kind in ("image", "background", "mask", "height"):
                ref = getattr(rec, kind)
                if ref is None:
                    continue
                p = manifest.resolve(ref)
                if not p.exists():
                    raise ManifestError(f"sample {rec.id!r}: missing {kind} file {str(p)!r}")
                if _png_size(p) != (sensor.h, sensor.w):
                    raise ManifestError(
                        f"sample {rec.id!r}: {kind} is {_png_size(p)}, expected {(sensor.h, sensor.w)}"
                    )
    # object ids must agree with the declared symmetry table when one is given
    if manifest.objects:
        used = set().union(*per_split.values()) if per_split else set()
        unknown = used - set(manifest.objects)
        if unknown:
            raise ManifestError(f"objects {sorted(unknown)} are not declared in the manifest header")


def load_manifest(path: os.PathLike, check_files: bool = True) -> DatasetManifest:
    """Read and eagerly validate a manifest file.

    File references are resolved relative to the manifest's directory. Pose
    angles are canonicalised per declared object symmetry at load.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from exc
    for key in ("sensor", "seed", "samples"):
        if key not in raw:
            raise ManifestError(f"{path}: missing header key {key!r}")
    s = raw["sensor"]
    sensor = SensorConfig(
        h=int(s["h"]),
        w=int(s["w"]),
        mm_per_px=float(s.get("mm_per_px", 1.0 / 20.0)),
        height_scale=float(s.get("height_scale", 1e-4)),
    )
    objects = {str(k): float(v) for k, v in raw.get("objects", {}).items()}
    samples = []
    for d in raw["samples"]:
        rec = SampleRecord.from_json(d)
        period = objects.get(rec.object_id, 360.0)
        pose = ContactPose(rec.pose.cx, rec.pose.cy, canonical_angle(rec.pose.theta, period))
        samples.append(replace(rec, pose=pose))
    manifest = DatasetManifest(sensor=sensor, seed=int(raw["seed"]), samples=samples,
                               objects=objects, root=path.parent)
    _validate(manifest, check_files)
    return manifest


def save_manifest(manifest: DatasetManifest, path: os.PathLike) -> None:
    path = Path(path)
    _validate(manifest, check_files=False)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest.to_json(), indent=1))
    os.replace(tmp, path)


def merge_manifests(parts: Iterable[DatasetManifest], root: Optional[Path] = None) -> DatasetManifest:
    """Concatenate manifests sharing a sensor config; file refs become absolute."""
    parts = list(parts)
    if not parts:
        return DatasetManifest(root=root)
    sensor = parts[0].sensor
    out = DatasetManifest(sensor=sensor, seed=parts[0].seed, root=root)
    for m in parts:
        if m.sensor != sensor:
            raise ManifestError("cannot merge manifests with different sensor configs")
        out.objects.update(m.objects)
        for rec in m.samples:
            out.samples.append(replace(
                rec,
                image=str(m.resolve(rec.image).resolve()),
                background=str(m.resolve(rec.background).resolve()),
                mask=None if rec.mask is None else str(m.resolve(rec.mask).resolve()),
                height=None if rec.height is None else str(m.resolve(rec.height).resolve()),
            ))
    _validate(out, check_files=False)
    return out


# ------------------------------------------------------ background handling


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")


def subtract_background(image: np.ndarray, background: np.ndarray) -> np.ndarray:
    """Contact-only image re-centred so that "no change" is mid-gray 0.5."""
    _check_same(image, background)
    return np.clip(image - background + np.float32(0.5), 0.0, 1.0).astype(np.float32)


def add_background(diff: np.ndarray, background: np.ndarray) -> np.ndarray:
    """Inverse of :func:`subtract_background` wherever no clamping occurred.

    Pixels that saturated during subtraction cannot be recovered.
    """
    _check_same(diff, background)
    return np.clip(diff + background - np.float32(0.5), 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------- bulk loading


@dataclass
class ArraySet:
    """Stacked in-memory view of a list of records."""

    records: list[SampleRecord]
    images: np.ndarray  # (N, H, W, 3) float32
    backgrounds: np.ndarray  # (N, H, W, 3)
    masks: Optional[np.ndarray]  # (N, H, W) uint8
    heights: Optional[np.ndarray]  # (N, H, W) float32, NaN where unavailable
    forces: np.ndarray  # (N, 3)
    poses: np.ndarray  # (N, 3)

    def __len__(self) -> int:
        return len(self.records)


def load_arrays(manifest: DatasetManifest, records: Optional[Sequence[SampleRecord]] = None) -> ArraySet:
    records = list(manifest.samples if records is None else records)
    n = len(records)
    h, w = manifest.sensor.h, manifest.sensor.w
    images = np.zeros((n, h, w, 3), np.float32)
    backgrounds = np.zeros((n, h, w, 3), np.float32)
    masks = np.zeros((n, h, w), np.uint8)
    heights = np.full((n, h, w), np.nan, np.float32)
    bg_cache: dict[str, np.ndarray] = {}
    have_mask = True
    for i, rec in enumerate(records):
        images[i] = load_image(manifest.resolve(rec.image))
        bkey = str(manifest.resolve(rec.background))
        if bkey not in bg_cache:
            bg_cache[bkey] = load_image(bkey)
        backgrounds[i] = bg_cache[bkey]
        if rec.mask is not None:
            masks[i] = load_mask(manifest.resolve(rec.mask))
        else:
            have_mask = False
        if rec.height is not None:
            heights[i] = load_height(manifest.resolve(rec.height), manifest.sensor.height_scale)
    forces = np.array([r.force.as_array() for r in records], np.float32).reshape(n, 3)
    poses = np.array([r.pose.as_array() for r in records], np.float32).reshape(n, 3)
    return ArraySet(records, images, backgrounds, masks if have_mask else None, heights, forces, poses)
