"""Turn one labelled reference sample into a generated dataset over a force x position grid.

Labels always come from the conditioning inputs (target force, transformed
pose), never from the generated pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data, masks
from .codec import Codec
from .data import ContactPose, DatasetManifest, ForceVector, SampleRecord
from .masks import MaskTransform
from .sampler import generate, generate_positioned
from .utils import log, np_rng

FORCE_RANGE = (1.0, 10.0)
STAGE2_FORCE_RANGE = (4.0, 10.0)
FIXED_FZ = 6.5


@dataclass
class GeneratedBatch:
    """In-memory augmentation result; ``skipped`` counts rejected items by reason."""

    ids: list = field(default_factory=list)
    images: np.ndarray | None = None
    masks: np.ndarray | None = None
    forces: list = field(default_factory=list)
    poses: list = field(default_factory=list)
    skipped: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ids)


def _skip(counter: dict, reason: str) -> None:
    counter[reason] = counter.get(reason, 0) + 1


def _valid_force(f: ForceVector, fz_range) -> bool:
    return fz_range[0] <= f.fz <= fz_range[1]


def sample_transform_grid(n_positions: int, max_dx: int, max_dy: int, angle_set: Sequence[int] | None = None,
                          seed: int = 0, h: int = 64, w: int = 64) -> list[MaskTransform]:
    """Draw distinct (dx, dy, dtheta) triples uniformly from the integer grid."""
    if max_dx < 0 or max_dy < 0 or 2 * max_dx >= w or 2 * max_dy >= h:
        raise ValueError("translation bounds exceed the frame")
    angles = sorted({int(a) % 360 for a in (range(360) if angle_set is None else angle_set)})
    if not angles:
        raise ValueError("empty angle set")
    nx, ny, na = 2 * max_dx + 1, 2 * max_dy + 1, len(angles)
    size = nx * ny * na
    if n_positions > size:
        raise ValueError(f"grid has only {size} points, {n_positions} requested")
    rng = np_rng(seed, "transform-grid")
    flat = rng.choice(size, size=n_positions, replace=False)
    out = []
    for k in flat:
        k = int(k)
        a, rest = divmod(k, nx * ny)
        iy, ix = divmod(rest, nx)
        out.append(MaskTransform(ix - max_dx, iy - max_dy, angles[a]))
    return out


def angle_subset(fraction: float, period: float = 360.0) -> list[int]:
    """Leading fraction of the distinct angles of an object (used for quarter-angle splits)."""
    span = int(period) if period > 0 else 360
    n = max(1, int(round(span * fraction)))
    return list(range(n))


def force_augment_arrays(ref_image: np.ndarray, background: np.ndarray, ref_force: ForceVector,
                         target_forces: Sequence[ForceVector], gen, codec: Codec, seed: int,
                         fz_range=FORCE_RANGE, steps: int = 50, prefix: str = "gen") -> GeneratedBatch:
    out = GeneratedBatch()
    keep = []
    for k, f in enumerate(target_forces):
        if _valid_force(f, fz_range):
            keep.append(f)
            out.ids.append(f"{prefix}-f{k:04d}")
        else:
            _skip(out.skipped, "force out of range")
    out.forces = keep
    if keep:
        refs = np.repeat(np.asarray(ref_image, np.float32)[None], len(keep), 0)
        out.images = generate(gen, codec, refs, background, [ref_force] * len(keep), keep, seed, steps,
                              sample_ids=out.ids)
    else:
        out.images = np.zeros((0,) + np.shape(ref_image), np.float32)
    return out


def full_augment_arrays(ref_image: np.ndarray, background: np.ndarray, ref_mask: np.ndarray,
                        ref_force: ForceVector, ref_pose: ContactPose, forces: Sequence[ForceVector],
                        transforms: Sequence[MaskTransform], pg, codec: Codec, seed: int, period: float = 360.0,
                        pairing: str = "grid", fz_range=STAGE2_FORCE_RANGE, steps: int = 50,
                        prefix: str = "gen", batch: int = 64) -> GeneratedBatch:
    """Positioned generation over ``forces`` x ``transforms``.

    ``pairing='grid'`` takes the Cartesian product; ``pairing='zip'`` pairs the
    i-th force with the i-th transform (equal-size fixed vs varying comparisons).
    """
    h, w = np.shape(ref_mask)
    if pairing == "grid":
        items = [(f, t) for t in transforms for f in forces]
    elif pairing == "zip":
        if len(forces) != len(transforms):
            raise ValueError("zip pairing needs equally many forces and transforms")
        items = list(zip(forces, transforms))
    else:
        raise ValueError(f"unknown pairing {pairing!r}")
    out = GeneratedBatch()
    mlist = []
    for k, (f, t) in enumerate(items):
        if not _valid_force(f, fz_range):
            _skip(out.skipped, "force out of range")
            continue
        try:
            pose = masks.pose_from_transform(ref_pose, t, h, w, period)
        except ValueError:
            _skip(out.skipped, "center off frame")
            continue
        m = masks.transform_mask(ref_mask, t)
        if not m.any():
            _skip(out.skipped, "mask empty")
            continue
        out.ids.append(f"{prefix}-{k:05d}")
        out.forces.append(f)
        out.poses.append(pose)
        mlist.append(m)
    if out.skipped:
        log.info("augmentation skipped %s", out.skipped)
    out.masks = np.stack(mlist) if mlist else np.zeros((0, h, w), np.uint8)
    if not mlist:
        out.images = np.zeros((0, h, w, 3), np.float32)
        return out
    chunks = []
    for i in range(0, len(out.ids), 1024):
        sl = slice(i, i + 1024)
        n = len(out.ids[sl])
        refs = np.repeat(np.asarray(ref_image, np.float32)[None], n, 0)
        chunks.append(generate_positioned(pg, codec, refs, background, [ref_force] * n, out.forces[sl],
                                          out.masks[sl].astype(np.float32), seed, steps,
                                          sample_ids=out.ids[sl], batch=batch))
    out.images = np.concatenate(chunks)
    return out


def write_generated(batch: GeneratedBatch, out_dir: Path, background: np.ndarray, object_id: str,
                    period: float, default_pose: ContactPose, split: str = "train",
                    sensor: data.SensorConfig | None = None, seed: int = 0) -> DatasetManifest:
    """Persist a generated batch as a validated manifest directory."""
    out_dir = Path(out_dir)
    (out_dir / "img").mkdir(parents=True, exist_ok=True)
    h, w = background.shape[:2]
    sensor = sensor or data.SensorConfig(h=h, w=w)
    data.save_image(out_dir / "background.png", background)
    man = DatasetManifest(sensor=sensor, seed=seed, root=out_dir, objects={object_id: period})
    for i, sid in enumerate(batch.ids):
        img_ref = f"img/{sid}.png"
        data.save_image(out_dir / img_ref, batch.images[i])
        mask_ref = None
        if batch.masks is not None and len(batch.masks):
            (out_dir / "mask").mkdir(exist_ok=True)
            mask_ref = f"mask/{sid}.png"
            data.save_mask(out_dir / mask_ref, batch.masks[i])
        pose = batch.poses[i] if batch.poses else default_pose
        man.samples.append(SampleRecord(id=sid, image=img_ref, background="background.png", mask=mask_ref,
                                        height=None, force=batch.forces[i], pose=pose, object_id=object_id,
                                        split=split, provenance="generated"))
    data.save_manifest(man, out_dir / "manifest.json")
    return data.load_manifest(out_dir / "manifest.json")


def _load_ref(ref: SampleRecord, source: DatasetManifest):
    img = data.load_image(source.resolve(ref.image))
    bg = data.load_image(source.resolve(ref.background))
    m = data.load_mask(source.resolve(ref.mask)) if ref.mask else None
    return img, bg, m


def force_augment(ref: SampleRecord, source: DatasetManifest, target_forces: Sequence[ForceVector], gen,
                  codec: Codec, seed: int, out_dir: Path, fz_range=FORCE_RANGE, steps: int = 50):
    """Stage-1 augmentation; returns (manifest, skip counts)."""
    img, bg, _ = _load_ref(ref, source)
    b = force_augment_arrays(img, bg, ref.force, target_forces, gen, codec, seed, fz_range, steps,
                             prefix=f"{ref.id}-gen")
    b.masks = None
    b.poses = [ref.pose] * len(b)
    man = write_generated(b, out_dir, bg, ref.object_id, source.period(ref.object_id), ref.pose,
                          sensor=source.sensor, seed=seed)
    return man, b.skipped


def full_augment(ref: SampleRecord, source: DatasetManifest, forces: Sequence[ForceVector],
                 transforms: Sequence[MaskTransform], pg, codec: Codec, seed: int, out_dir: Path,
                 pairing: str = "grid", fz_range=STAGE2_FORCE_RANGE, steps: int = 50):
    """Stage-2 augmentation over forces x positions; returns (manifest, skip counts)."""
    img, bg, m = _load_ref(ref, source)
    if m is None:
        raise ValueError(f"reference {ref.id} has no contact mask")
    period = source.period(ref.object_id)
    b = full_augment_arrays(img, bg, m, ref.force, ref.pose, forces, transforms, pg, codec, seed, period,
                            pairing, fz_range, steps, prefix=f"{ref.id}-gen")
    man = write_generated(b, out_dir, bg, ref.object_id, period, ref.pose, sensor=source.sensor, seed=seed)
    return man, b.skipped


def fixed_forces(n: int, fz: float = FIXED_FZ) -> list[ForceVector]:
    return [ForceVector(0.0, 0.0, fz)] * n


def varying_forces(n: int, seed: int, fz_range=STAGE2_FORCE_RANGE, shear_max: float = 0.0,
                   levels: Sequence[float] | None = None) -> list[ForceVector]:
    """``n`` forces drawn from ``levels`` (or uniformly over the range), reproducibly."""
    rng = np_rng(seed, "varying-forces")
    out = []
    for _ in range(n):
        fz = float(rng.choice(np.asarray(levels))) if levels is not None else float(rng.uniform(*fz_range))
        fx, fy = (rng.uniform(-shear_max, shear_max, 2) if shear_max > 0 else (0.0, 0.0))
        out.append(ForceVector(round(float(fx), 3), round(float(fy), 3), round(fz, 3)))
    return out
