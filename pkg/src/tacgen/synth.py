"""Build on-disk synthetic datasets from the oracle renderer."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data, masks, sensor
from .data import DatasetManifest, ForceVector, SampleRecord
from .masks import MaskTransform
from .utils import np_rng


@dataclass
class SynthConfig:
    objects: Sequence[str] = masks.OBJECTS
    positions: dict = field(default_factory=lambda: {"train": 100, "val": 5, "test": 20})
    forces_per_position: int = 6
    fz_range: tuple = (1.0, 10.0)
    shear_max: float = 1.0
    max_shift: int = 12
    # first train position of every object is the untransformed prototype
    include_canonical: bool = True
    no_contact_per_object: int = 0


def sample_force(rng: np.random.Generator, fz_range=(1.0, 10.0), shear_max: float = 1.0) -> ForceVector:
    fz = rng.uniform(*fz_range)
    fx, fy = rng.uniform(-shear_max, shear_max, size=2)
    return ForceVector(round(float(fx), 3), round(float(fy), 3), round(float(fz), 3))


def random_transform(rng: np.random.Generator, max_shift: int, angles: Sequence[int] | None = None) -> MaskTransform:
    dx, dy = (int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
    dth = int(rng.integers(0, 360)) if angles is None else int(rng.choice(np.asarray(angles)))
    return MaskTransform(dx, dy, dth)


def write_sample(root: Path, sid: str, img: np.ndarray, mask: np.ndarray | None,
                 height: np.ndarray | None, height_scale: float) -> dict:
    refs = {"image": f"img/{sid}.png", "mask": None, "height": None}
    for sub in ("img", "mask", "height"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    data.save_image(root / refs["image"], img)
    if mask is not None:
        refs["mask"] = f"mask/{sid}.png"
        data.save_mask(root / refs["mask"], mask)
    if height is not None:
        refs["height"] = f"height/{sid}.png"
        data.save_height(root / refs["height"], height, height_scale)
    return refs


def synth_dataset(out_dir: Path, config: SynthConfig, params: sensor.SensorParams, seed: int) -> DatasetManifest:
    """Render a labelled dataset: objects x positions x forces, positions disjoint across splits.

    Each record's randomness derives from (seed, object, split, position index),
    so the output does not depend on generation order.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sc = data.SensorConfig(h=params.h, w=params.w)
    bg = sensor.render_background(params)
    data.save_image(out_dir / "background.png", bg)
    # store the background exactly as it will be read back
    bg = data.load_image(out_dir / "background.png")
    manifest = DatasetManifest(sensor=sc, seed=seed, root=out_dir,
                               objects={o: masks.OBJECT_SYMMETRY.get(o, 360.0) for o in config.objects})
    base_pose = masks.canonical_pose(params.h, params.w)
    for obj in config.objects:
        proto = masks.prototype_mask(obj, params.h, params.w)
        period = manifest.period(obj)
        for split in data.SPLITS:
            for p in range(config.positions.get(split, 0)):
                rng = np_rng(seed, obj, split, p)
                if config.include_canonical and split == "train" and p == 0:
                    t = masks.IDENTITY
                else:
                    t = random_transform(rng, config.max_shift)
                m = masks.transform_mask(proto, t)
                pose = masks.pose_from_transform(base_pose, t, params.h, params.w, period)
                for k in range(config.forces_per_position):
                    f = sample_force(rng, config.fz_range, config.shear_max)
                    img, hm = sensor.render(m, f, params, bg)
                    sid = f"{obj}-{split}-p{p:04d}-f{k:02d}"
                    refs = write_sample(out_dir, sid, img, m, hm, sc.height_scale)
                    manifest.samples.append(SampleRecord(
                        id=sid, image=refs["image"], background="background.png", mask=refs["mask"],
                        height=refs["height"], force=f, pose=pose, object_id=obj, split=split,
                        provenance="synthetic"))
        for k in range(config.no_contact_per_object):
            rng = np_rng(seed, obj, "nocontact", k)
            t = random_transform(rng, config.max_shift)
            m = masks.transform_mask(proto, t)
            pose = masks.pose_from_transform(base_pose, t, params.h, params.w, period)
            f = ForceVector(0.0, 0.0, 0.0)
            img, hm = sensor.render(m, f, params, bg)
            sid = f"{obj}-test-nc{k:03d}"
            refs = write_sample(out_dir, sid, img, m, hm, sc.height_scale)
            manifest.samples.append(SampleRecord(
                id=sid, image=refs["image"], background="background.png", mask=refs["mask"],
                height=refs["height"], force=f, pose=pose, object_id=obj, split="test",
                provenance="synthetic"))
    data.save_manifest(manifest, out_dir / "manifest.json")
    return manifest


def render_truth(mask: np.ndarray, force: ForceVector, params: sensor.SensorParams,
                 background: np.ndarray) -> np.ndarray:
    """Oracle image quantised exactly as a stored sample would be."""
    img, _ = sensor.render(mask, force, params, background)
    return data.to_uint8(img).astype(np.float32) / np.float32(255.0)


def position_key(rec: SampleRecord) -> tuple:
    return (rec.object_id, round(rec.pose.cx, 3), round(rec.pose.cy, 3), round(rec.pose.theta, 3))


def group_by_position(records: Sequence[SampleRecord]) -> dict[tuple, list[int]]:
    groups: dict[tuple, list[int]] = {}
    for i, r in enumerate(records):
        groups.setdefault(position_key(r), []).append(i)
    return groups


def canonical_reference(manifest: DatasetManifest, obj: str, fz_target: float = 6.5) -> SampleRecord:
    """Train sample of ``obj`` at the prototype pose whose normal force is closest to ``fz_target``."""
    h, w = manifest.sensor.h, manifest.sensor.w
    base = masks.canonical_pose(h, w)
    cands = [r for r in manifest.split("train") if r.object_id == obj
             and abs(r.pose.cx - base.cx) < 1e-6 and abs(r.pose.cy - base.cy) < 1e-6 and r.pose.theta == 0.0]
    if not cands:
        raise ValueError(f"no canonical-pose training sample for {obj!r}")
    return min(cands, key=lambda r: (abs(r.force.fz - fz_target), r.id))

