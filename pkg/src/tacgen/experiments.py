"""Desk-scale experiment pipelines with content-addressed artifact caching.

Every trained artifact is stored under a key derived from the configuration
that produced it (and the keys of its inputs), so repeated runs reuse earlier
work while any config change retrains exactly the affected stages.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import os
import shutil
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import augment, data, masks, metrics, sampler, sensor, synth
from .codec import Codec, CodecConfig, train_codec
from .controlnet import PositionGenerator, train_stage2
from .data import ForceVector
from .diffusion import (DiTConfig, Generator, LatentPairs, NoiseSchedule, TrainConfig, build_force_pairs,
                        build_position_tuples, train_hybrid, train_separate_position, train_stage1)
from .estimators import (EstimatorConfig, TrainSet, accuracy, pose_errors, predict_forces, predict_poses,
                         traditional_augment, train_classifier, train_force_estimator, train_pose_estimator)
from .utils import log, np_rng

# bump when a change alters what a cached artifact would contain
ARTIFACT_VERSION = "3"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage


DESK: dict = {
    "seed": 0,
    "sensor": {"h": 64, "w": 64},
    "data": {"objects": list(masks.OBJECTS), "positions": {"train": 100, "val": 5, "test": 20},
             "forces_per_position": 6, "max_shift": 12, "shear_max": 1.0},
    "codec": {"factor": 4, "channels": 4, "width": 64, "steps": 1500, "batch": 32, "lr": 2e-3, "lr_min": 5e-5,
              "mask_fraction": 0.25, "ssim_gate": 0.90, "identity": False},
    "dit": {"patch": 2, "depth": 4, "dim": 128, "heads": 4, "force_dim": 64, "target": "eps"},
    "stage1": {"pairs": 2000, "steps": 8000, "batch": 16, "lr": 3e-4, "lr_min": 1e-5},
    "stage2": {"tuples": 1500, "steps": 6000, "batch": 16, "lr": 1e-4, "lr_min": 1e-6, "exclude": ["tshape"]},
    "baselines": {"steps": 6000, "batch": 16, "lr": 3e-4, "lr_min": 1e-5},
    "sampling": {"eval_steps": 50, "aug_steps": 20, "batch": 128},
    "eval": {"stage1_queries": 200, "stage2_queries": 200, "shift_trials": 24, "shift_px": 10},
    "force_est": {"real": [100], "generated": [0, 2000], "forces_per_ref": 20, "seeds": [0, 1, 2],
                  "steps": 2500, "batch": 32, "lr": 1e-3, "dim": 64, "depth": 2, "aux_weight": 0.5},
    "pose_est": {"objects": ["cyl_mid", "cross", "tshape"], "per_object": 4000, "seeds": [0, 1, 2],
                 "force_levels": [4.0, 5.2, 6.4, 7.6, 8.8, 10.0], "fixed_fz": 6.5, "eval_fz_min": 4.0,
                 "steps": 6000, "batch": 32, "lr": 1e-3, "dim": 64, "depth": 2, "aux_weight": 0.5},
    "angle_split": {"object": "cyl_mid", "fractions": [0.0, 0.25, 0.5, 0.75, 1.0], "per_split": 600,
                    "seed": 0},
    "classify": {"sizes": [2400, 4800], "models": ["cnn", "vit"], "seed": 0, "eval_fz_min": 4.0,
                 "steps": 1500, "cnn_steps": 600, "batch": 32, "lr": 1e-3, "dim": 64,
                 "depth": 2},
}

SMOKE: dict = copy.deepcopy(DESK)
SMOKE.update({
    "data": {"objects": ["cyl_mid", "cross", "tshape"], "positions": {"train": 4, "val": 1, "test": 3},
             "forces_per_position": 3, "max_shift": 8, "shear_max": 1.0},
    "codec": {**DESK["codec"], "identity": True},
    "dit": {"patch": 8, "depth": 2, "dim": 32, "heads": 2, "force_dim": 16, "target": "eps"},
    "stage1": {"pairs": 40, "steps": 30, "batch": 8, "lr": 1e-3, "lr_min": 1e-4},
    "stage2": {"tuples": 30, "steps": 20, "batch": 8, "lr": 1e-3, "lr_min": 1e-4, "exclude": ["tshape"]},
    "baselines": {"steps": 20, "batch": 8, "lr": 1e-3, "lr_min": 1e-4},
    "sampling": {"eval_steps": 4, "aug_steps": 3, "batch": 32},
    "eval": {"stage1_queries": 6, "stage2_queries": 6, "shift_trials": 3, "shift_px": 4},
    "force_est": {**DESK["force_est"], "real": [6], "generated": [0, 12], "forces_per_ref": 2, "seeds": [0, 1],
                  "steps": 20, "batch": 8, "dim": 32, "depth": 1},
    "pose_est": {**DESK["pose_est"], "objects": ["cross", "tshape"], "per_object": 12, "seeds": [0, 1],
                 "steps": 20, "batch": 8, "dim": 32, "depth": 1},
    "angle_split": {"object": "cross", "fractions": [0.0, 1.0], "per_split": 8, "seed": 0},
    "classify": {**DESK["classify"], "sizes": [12], "steps": 10, "cnn_steps": 5, "batch": 8, "dim": 32, "depth": 1},
})

PROFILES = {"desk": DESK, "smoke": SMOKE}


def profile(name: str) -> dict:
    if name not in PROFILES:
        raise KeyError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return copy.deepcopy(PROFILES[name])


def config_hash(*parts) -> str:
    blob = json.dumps([ARTIFACT_VERSION, *parts], sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


def write_csv(path: Path, fields: list[str], rows: list[dict]) -> None:
    """Deterministic CSV: fixed column order, floats with six decimals."""
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in fields})


def read_csv(path: Path) -> list[dict]:
    with open(path) as fh:
        return list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))


def _atomic_save(obj_save: Callable[[Path], None], path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    obj_save(tmp)
    os.replace(tmp, path)


def _train_cfg(d: dict) -> TrainConfig:
    return TrainConfig(steps=d["steps"], batch=d["batch"], lr=d["lr"], lr_min=d["lr_min"])


class Pipeline:
    """Lazily built, cached chain: dataset -> codec -> stage 1 -> stage 2 / baselines."""

    def __init__(self, cfg: dict, run_dir: Path, cache_dir: Path | None = None, inputs: dict | None = None):
        # ``inputs`` may pin existing artifacts: data (manifest), codec, stage1, stage2, hybrid, separate
        self.inputs = {k: Path(v) for k, v in (inputs or {}).items() if v}
        self.cfg = cfg
        self.seed = int(cfg["seed"])
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.cache = Path(cache_dir) if cache_dir else self.run_dir / "artifacts"
        self.cache.mkdir(parents=True, exist_ok=True)
        self.params = sensor.SensorParams(h=cfg["sensor"]["h"], w=cfg["sensor"]["w"])
        self.schedule = NoiseSchedule()

    # ---------------------------------------------------------------- keys

    def _input_key(self, name: str) -> str | None:
        path = self.inputs.get(name)
        if path is None:
            return None
        return "file-" + hashlib.sha256(path.read_bytes()).hexdigest()[:20]

    @cached_property
    def data_key(self) -> str:
        return self._input_key("data") or config_hash("data", self.seed, self.cfg["sensor"], self.cfg["data"])

    @cached_property
    def codec_key(self) -> str:
        return self._input_key("codec") or config_hash("codec", self.data_key, self.cfg["codec"])

    @cached_property
    def stage1_key(self) -> str:
        return self._input_key("stage1") or config_hash("stage1", self.codec_key, self.cfg["dit"],
                                                        self.cfg["stage1"])

    def _stage(self, name: str, fn):
        try:
            return fn()
        except StageError:
            raise
        except Exception as e:  # noqa: BLE001 - re-raised with the stage name attached
            raise StageError(name, e) from e

    # ---------------------------------------------------------------- data

    @cached_property
    def dataset(self) -> data.DatasetManifest:
        def build():
            if "data" in self.inputs:
                return data.load_manifest(self.inputs["data"])
            d = self.cache / f"dataset-{self.data_key}"
            if (d / "manifest.json").exists():
                return data.load_manifest(d / "manifest.json", check_files=False)
            tmp = self.cache / f"dataset-{self.data_key}.tmp"
            shutil.rmtree(tmp, ignore_errors=True)
            dc = self.cfg["data"]
            sc = synth.SynthConfig(objects=tuple(dc["objects"]), positions=dict(dc["positions"]),
                                   forces_per_position=dc["forces_per_position"], max_shift=dc["max_shift"],
                                   shear_max=dc["shear_max"])
            synth.synth_dataset(tmp, sc, self.params, self.seed)
            os.replace(tmp, d)
            return data.load_manifest(d / "manifest.json")
        return self._stage("synth-data", build)

    @cached_property
    def arrays(self) -> data.ArraySet:
        return data.load_arrays(self.dataset)

    @cached_property
    def background(self) -> np.ndarray:
        return self.arrays.backgrounds[0]

    @cached_property
    def diffs(self) -> np.ndarray:
        a = self.arrays
        return np.stack([data.subtract_background(i, b) for i, b in zip(a.images, a.backgrounds)])

    def indices(self, split: str, exclude=(), fz_min: float | None = None, objects=None) -> list[int]:
        out = []
        for i, r in enumerate(self.dataset.samples):
            if r.split != split or r.object_id in exclude:
                continue
            if objects is not None and r.object_id not in objects:
                continue
            if fz_min is not None and r.force.fz < fz_min:
                continue
            out.append(i)
        return out

    def groups(self, split: str) -> dict:
        idx = self.indices(split)
        g = synth.group_by_position([self.dataset.samples[i] for i in idx])
        return {k: [idx[j] for j in v] for k, v in g.items()}

    # ---------------------------------------------------------------- codec

    @cached_property
    def codec(self) -> Codec:
        def build():
            if "codec" in self.inputs:
                return Codec.load(self.inputs["codec"])
            cc = CodecConfig(**self.cfg["codec"])
            if cc.identity:
                return Codec.identity()
            path = self.cache / f"codec-{self.codec_key}.pt"
            if path.exists():
                return Codec.load(path)
            codec, stats = train_codec(self.dataset, cc, self.seed)
            log.info("codec trained: %s", stats)
            _atomic_save(codec.save, path)
            (self.cache / f"codec-{self.codec_key}.json").write_text(json.dumps(stats, sort_keys=True))
            return codec
        return self._stage("train-codec", build)

    @cached_property
    def z(self) -> torch.Tensor:
        return self.codec.encode(self.diffs)

    @cached_property
    def z_mask(self) -> torch.Tensor:
        return self.codec.encode(self.arrays.masks)

    def dit_config(self, mode: str) -> DiTConfig:
        d = self.cfg["dit"]
        return DiTConfig(latent_channels=self.codec.latent_channels,
                         latent_size=self.cfg["sensor"]["h"] // self.codec.factor, mode=mode, **d)

    @cached_property
    def forces(self) -> torch.Tensor:
        return torch.from_numpy(self.arrays.forces.astype(np.float32))

    # -------------------------------------------------------------- stage 1

    @cached_property
    def stage1_pairs(self) -> LatentPairs:
        pairs = build_force_pairs(self.groups("train"), self.cfg["stage1"]["pairs"], self.seed)
        i = torch.tensor([p[0] for p in pairs])
        j = torch.tensor([p[1] for p in pairs])
        return LatentPairs(self.z[i], self.z[j], self.forces[j] - self.forces[i])

    @cached_property
    def stage1(self) -> Generator:
        def build():
            if "stage1" in self.inputs:
                return Generator.load(self.inputs["stage1"])
            path = self.cache / f"stage1-{self.stage1_key}.pt"
            if path.exists():
                return Generator.load(path)
            gen, curve = train_stage1(self.stage1_pairs, self.dit_config("force-only"), self.schedule,
                                      _train_cfg(self.cfg["stage1"]), self.seed, self.codec.fingerprint)
            self._save_curve("stage1", self.stage1_key, curve)
            _atomic_save(gen.save, path)
            return gen
        return self._stage("train-stage1", build)

    def _save_curve(self, name: str, key: str, curve: list) -> None:
        write_csv(self.cache / f"{name}-{key}-loss.csv", ["step", "loss", "lr"],
                  [{"step": s, "loss": float(l), "lr": float(r)} for s, l, r in curve])

    # -------------------------------------------------------------- stage 2

    @cached_property
    def position_tuples(self) -> list[tuple[int, int]]:
        return build_position_tuples(self.groups("train"), self.cfg["stage2"]["tuples"], self.seed,
                                     exclude=tuple(self.cfg["stage2"]["exclude"]))

    def _tuple_pairs(self, ref_latents: torch.Tensor | None = None) -> LatentPairs:
        i = torch.tensor([p[0] for p in self.position_tuples])
        j = torch.tensor([p[1] for p in self.position_tuples])
        z_ref = self.z[i] if ref_latents is None else ref_latents
        return LatentPairs(z_ref, self.z[j], self.forces[j] - self.forces[i], self.z_mask[j])

    @cached_property
    def stage2_key(self) -> str:
        return self._input_key("stage2") or config_hash("stage2", self.stage1_key, self.cfg["stage2"])

    @cached_property
    def stage2(self) -> PositionGenerator:
        def build():
            if "stage2" in self.inputs:
                return PositionGenerator.load(self.inputs["stage2"], self.stage1)
            path = self.cache / f"stage2-{self.stage2_key}.pt"
            if path.exists():
                return PositionGenerator.load(path, self.stage1)
            pg, curve = train_stage2(self._tuple_pairs(), self.stage1, _train_cfg(self.cfg["stage2"]), self.seed)
            self._save_curve("stage2", self.stage2_key, curve)
            _atomic_save(pg.save, path)
            return pg
        return self._stage("train-stage2", build)

    # ------------------------------------------------------------ baselines

    @cached_property
    def baseline_key(self) -> str:
        return config_hash("baselines", self.codec_key, self.cfg["dit"], self.cfg["stage2"]["tuples"],
                           self.cfg["stage2"]["exclude"], self.cfg["baselines"])

    @cached_property
    def hybrid(self) -> Generator:
        def build():
            if "hybrid" in self.inputs:
                return Generator.load(self.inputs["hybrid"])
            path = self.cache / f"hybrid-{self.baseline_key}.pt"
            if path.exists():
                return Generator.load(path)
            gen, curve = train_hybrid(self._tuple_pairs(), self.dit_config("hybrid"), self.schedule,
                                      _train_cfg(self.cfg["baselines"]), self.seed, self.codec.fingerprint)
            self._save_curve("hybrid", self.baseline_key, curve)
            _atomic_save(gen.save, path)
            return gen
        return self._stage("train-baseline-hybrid", build)

    def intermediate_latents(self) -> torch.Tensor:
        """Stage-1 samples at the reference position with the target force: the position model's input."""
        i = torch.tensor([p[0] for p in self.position_tuples])
        j = torch.tensor([p[1] for p in self.position_tuples])
        ids = [f"separate-train-{k:05d}" for k in range(len(i))]
        s = self.cfg["sampling"]
        return sampler.sample_force_latents(self.stage1, self.codec, self.z[i], self.forces[j] - self.forces[i], ids,
                                            self.seed, s["eval_steps"], 0.0, s["batch"])

    @cached_property
    def separate_key(self) -> str:
        return config_hash("separate", self.baseline_key, self.stage1_key, self.cfg["sampling"]["eval_steps"])

    @cached_property
    def separate(self) -> Generator:
        def build():
            if "separate" in self.inputs:
                return Generator.load(self.inputs["separate"])
            path = self.cache / f"separate-{self.separate_key}.pt"
            if path.exists():
                return Generator.load(path)
            pairs = self._tuple_pairs(self.intermediate_latents())
            gen, curve = train_separate_position(pairs, self.dit_config("separate"), self.schedule,
                                                 _train_cfg(self.cfg["baselines"]), self.seed,
                                                 self.codec.fingerprint)
            self._save_curve("separate", self.separate_key, curve)
            _atomic_save(gen.save, path)
            return gen
        return self._stage("train-baseline-separate", build)


# ============================================================== evaluations


def _random_force(rng: np.random.Generator, fz_range, shear_max: float) -> ForceVector:
    return synth.sample_force(rng, fz_range, shear_max)


def stage1_queries(p: Pipeline) -> dict:
    """Held-out (position, target force) queries: reference from the test split, oracle truth."""
    rng = np_rng(p.seed, "stage1-queries")
    pool = p.indices("test")
    n = p.cfg["eval"]["stage1_queries"]
    refs = [pool[k] for k in rng.choice(len(pool), size=n, replace=len(pool) < n)]
    a = p.arrays
    tf = [_random_force(rng, augment.FORCE_RANGE, p.cfg["data"]["shear_max"]) for _ in refs]
    truth = np.stack([synth.render_truth(a.masks[i], f, p.params, a.backgrounds[i]) for i, f in zip(refs, tf)])
    return {"refs": refs, "targets": tf, "truth": truth, "ids": [f"s1q{k:04d}" for k in range(n)]}


def eval_stage1(p: Pipeline) -> dict:
    q = stage1_queries(p)
    a = p.arrays
    s = p.cfg["sampling"]
    gen = sampler.generate(p.stage1, p.codec, a.images[q["refs"]], a.backgrounds[q["refs"]],
                           [p.dataset.samples[i].force for i in q["refs"]], q["targets"], p.seed,
                           s["eval_steps"], sample_ids=q["ids"], batch=s["batch"])
    model = metrics.summarize("stage1", "test", gen, q["truth"])
    copy_ref = metrics.summarize("copy-reference", "test", a.images[q["refs"]], q["truth"])
    return {"rows": [model, copy_ref], "generated": gen, "queries": q}


def stage2_queries(p: Pipeline) -> dict:
    """Reference at one held-out position, target mask from another held-out position of the same object."""
    rng = np_rng(p.seed, "stage2-queries")
    excl = tuple(p.cfg["stage2"]["exclude"])
    groups = {k: v for k, v in p.groups("test").items() if k[0] not in excl}
    by_obj: dict[str, list] = {}
    for k in sorted(groups, key=repr):
        by_obj.setdefault(k[0], []).append(k)
    objs = [o for o in sorted(by_obj) if len(by_obj[o]) >= 2]
    n = p.cfg["eval"]["stage2_queries"]
    a = p.arrays
    refs, tgt_masks, tf = [], [], []
    for _ in range(n):
        o = objs[rng.integers(len(objs))]
        ka, kb = rng.choice(len(by_obj[o]), size=2, replace=False)
        ga, gb = groups[by_obj[o][ka]], groups[by_obj[o][kb]]
        refs.append(ga[rng.integers(len(ga))])
        tgt_masks.append(a.masks[gb[0]])
        tf.append(_random_force(rng, augment.STAGE2_FORCE_RANGE, p.cfg["data"]["shear_max"]))
    truth = np.stack([synth.render_truth(m, f, p.params, a.backgrounds[i]) for i, m, f in zip(refs, tgt_masks, tf)])
    return {"refs": refs, "masks": np.stack(tgt_masks), "targets": tf, "truth": truth,
            "ids": [f"s2q{k:04d}" for k in range(n)]}


def _positioned(p: Pipeline, model: str, q: dict) -> np.ndarray:
    a = p.arrays
    s = p.cfg["sampling"]
    args = (a.images[q["refs"]], a.backgrounds[q["refs"]], [p.dataset.samples[i].force for i in q["refs"]],
            q["targets"], q["masks"].astype(np.float32), p.seed, s["eval_steps"])
    kw = {"sample_ids": q["ids"], "batch": s["batch"]}
    if model == "two-stage":
        return sampler.generate_positioned(p.stage2, p.codec, *args, **kw)
    if model == "hybrid":
        return sampler.generate_hybrid(p.hybrid, p.codec, *args, **kw)
    if model == "separate":
        return sampler.generate_separate(p.stage1, p.separate, p.codec, *args, **kw)
    raise ValueError(model)


def eval_stage2(p: Pipeline) -> dict:
    q = stage2_queries(p)
    gen = _positioned(p, "two-stage", q)
    return {"rows": [metrics.summarize("two-stage", "test", gen, q["truth"])], "generated": gen, "queries": q}


def shift_trials(p: Pipeline) -> list[dict]:
    """Generate with a target mask and with the same mask shifted along x; measure the centroid shift."""
    rng = np_rng(p.seed, "shift-trials")
    shift = p.cfg["eval"]["shift_px"]
    excl = tuple(p.cfg["stage2"]["exclude"])
    pool = p.indices("test", exclude=excl)
    a = p.arrays
    rows = []
    attempts = 0
    while len(rows) < p.cfg["eval"]["shift_trials"]:
        attempts += 1
        if attempts > 100 * p.cfg["eval"]["shift_trials"]:
            raise RuntimeError("could not find masks that stay in frame after the shift")
        ref = pool[rng.integers(len(pool))]
        other = pool[rng.integers(len(pool))]
        if p.dataset.samples[other].object_id != p.dataset.samples[ref].object_id:
            continue
        m0 = masks.transform_mask(a.masks[other], masks.MaskTransform(-shift // 2, 0, 0))
        m1 = masks.transform_mask(m0, masks.MaskTransform(shift, 0, 0))
        if m0.sum() != a.masks[other].sum() or m1.sum() != m0.sum():
            continue
        f = _random_force(rng, (6.0, 10.0), 0.0)
        k = len(rows)
        imgs = sampler.generate_positioned(
            p.stage2, p.codec, a.images[[ref, ref]], a.backgrounds[[ref, ref]],
            [p.dataset.samples[ref].force] * 2, [f, f], np.stack([m0, m1]).astype(np.float32), p.seed,
            p.cfg["sampling"]["eval_steps"], sample_ids=[f"shift{k:03d}", f"shift{k:03d}"])
        c0 = metrics.contact_centroid(imgs[0], a.backgrounds[ref])
        c1 = metrics.contact_centroid(imgs[1], a.backgrounds[ref])
        rows.append({"trial": k, "ref": p.dataset.samples[ref].id, "commanded": float(shift),
                     "measured_dx": float(c1[0] - c0[0]), "measured_dy": float(c1[1] - c0[1])})
    return rows


def table1(p: Pipeline, out_dir: Path) -> list[dict]:
    """Positioned generation benchmark for the two-stage model and both baselines."""
    q = stage2_queries(p)
    rows, grid = [], []
    for model in ("two-stage", "hybrid", "separate"):
        gen = _positioned(p, model, q)
        rows.append(metrics.summarize(model, "test", gen, q["truth"]))
        grid.append(np.concatenate([metrics.error_map(gen[k], q["truth"][k]) for k in range(min(6, len(gen)))], 1))
    metrics.write_report(rows, out_dir / "table1.csv")
    data.save_image(out_dir / "table1_error_maps.png", np.concatenate(grid, 0))
    return rows


def _estimator_cfg(d: dict, task: str) -> EstimatorConfig:
    return EstimatorConfig(task=task, steps=d["steps"], batch=d["batch"], lr=d["lr"], dim=d["dim"],
                           depth=d["depth"], aux_weight=d.get("aux_weight", 0.5))


def _gen_cache(p: Pipeline, name: str, key: str, build: Callable[[], dict]) -> dict:
    path = p.cache / f"{name}-{key}.npz"
    if path.exists():
        with np.load(path, allow_pickle=False) as z:
            return {k: z[k] for k in z.files}
    out = build()

    def save(tmp: Path) -> None:
        with open(tmp, "wb") as fh:
            np.savez(fh, **out)
    _atomic_save(save, path)
    return out


def fig4(p: Pipeline, out_dir: Path) -> list[dict]:
    """Force-estimator MAE across (real count x generated count) and seeds."""
    fc = p.cfg["force_est"]
    a = p.arrays
    rng = np_rng(p.seed, "fig4-real")
    train_pool = p.indices("train")
    n_real_max = max(fc["real"])
    real_all = [train_pool[k] for k in rng.choice(len(train_pool), n_real_max, replace=False)]
    n_gen_max = max(fc["generated"])
    n_refs = -(-n_gen_max // fc["forces_per_ref"]) if n_gen_max else 0
    s = p.cfg["sampling"]

    def build():
        refs = [real_all[k % len(real_all)] for k in range(n_refs)]
        grng = np_rng(p.seed, "fig4-targets")
        targets = [[_random_force(grng, augment.FORCE_RANGE, p.cfg["data"]["shear_max"])
                    for _ in range(fc["forces_per_ref"])] for _ in refs]
        ref_idx = [r for r, ts in zip(refs, targets) for _ in ts]
        flat = [f for ts in targets for f in ts]
        ids = [f"fig4-{k:05d}" for k in range(len(flat))]
        imgs = sampler.generate(p.stage1, p.codec, a.images[ref_idx], a.backgrounds[ref_idx],
                                [p.dataset.samples[i].force for i in ref_idx], flat, p.seed, s["aug_steps"],
                                sample_ids=ids, batch=s["batch"]) if flat else np.zeros((0,) + a.images.shape[1:])
        return {"images": imgs.astype(np.float32), "forces": np.array([f.as_array() for f in flat], np.float32)
                .reshape(-1, 3)}
    gkey = config_hash("fig4-gen", p.stage1_key, fc["real"], fc["generated"], fc["forces_per_ref"], s["aug_steps"])
    gen = _gen_cache(p, "fig4-gen", gkey, build)
    test = p.indices("test")
    rows = []
    for n_real in fc["real"]:
        real = real_all[:n_real]
        real_set = TrainSet(a.images[real], a.forces[real], a.heights[real])
        for n_gen in fc["generated"]:
            parts = [real_set]
            if n_gen:
                sel = np.arange(n_gen)
                parts.append(TrainSet(gen["images"][sel], gen["forces"][sel],
                                      np.full((n_gen,) + a.images.shape[1:3], np.nan, np.float32)))
            ts = TrainSet.concat(parts)
            for seed in fc["seeds"]:
                w = train_force_estimator(ts, _estimator_cfg(fc, "force"), seed)
                pred = predict_forces(w, a.images[test])
                err = np.abs(pred - a.forces[test]).mean(0)
                rows.append({"real": n_real, "generated": n_gen, "seed": seed, "n_test": len(test),
                             "mae": float(err.mean()), "mae_fx": float(err[0]), "mae_fy": float(err[1]),
                             "mae_fz": float(err[2])})
                log.info("fig4 real=%d gen=%d seed=%d mae=%.4f", n_real, n_gen, seed, err.mean())
    write_csv(out_dir / "fig4.csv", ["real", "generated", "seed", "n_test", "mae", "mae_fx", "mae_fy", "mae_fz"],
              rows)
    return rows


def _pose_generated(p: Pipeline, obj: str, mode: str, n: int, angles=None, tag: str = "table2") -> dict:
    """Generated pose-training set for one object from its canonical reference."""
    pc = p.cfg["pose_est"]
    s = p.cfg["sampling"]
    man = p.dataset
    ref = synth.canonical_reference(man, obj, pc["fixed_fz"])
    k = man.samples.index(ref)
    a = p.arrays
    period = man.period(obj)
    key = config_hash(tag, p.stage2_key, obj, mode, n, angles, pc["force_levels"], pc["fixed_fz"],
                      p.cfg["data"]["max_shift"], s["aug_steps"])

    def build():
        ms = p.cfg["data"]["max_shift"]
        tfs = augment.sample_transform_grid(n, ms, ms, angles, seed=p.seed, h=p.params.h, w=p.params.w)
        if mode == "fixed":
            forces = augment.fixed_forces(n, pc["fixed_fz"])
        else:
            forces = augment.varying_forces(n, p.seed, levels=pc["force_levels"])
        b = augment.full_augment_arrays(a.images[k], a.backgrounds[k], a.masks[k], ref.force, ref.pose, forces, tfs,
                                        p.stage2, p.codec, p.seed, period, pairing="zip", steps=s["aug_steps"],
                                        prefix=f"{tag}-{obj}-{mode}", batch=s["batch"])
        return {"images": b.images.astype(np.float32), "masks": b.masks.astype(np.float32),
                "poses": np.array([q.as_array() for q in b.poses], np.float64).reshape(-1, 3),
                "forces": np.array([f.as_array() for f in b.forces], np.float32).reshape(-1, 3)}
    return _gen_cache(p, f"{tag}-{obj}-{mode}", key, build)


def _pose_eval(p: Pipeline, obj: str, w, fz_min: float) -> tuple[float, float, int]:
    idx = p.indices("test", objects=(obj,), fz_min=fz_min)
    period = p.dataset.period(obj)
    pred = predict_poses(w, p.arrays.images[idx], period)
    c, ang = pose_errors(pred, p.arrays.poses[idx], period)
    return c, ang, len(idx)


def table2(p: Pipeline, out_dir: Path) -> list[dict]:
    """Pose estimation from purely generated data: varying vs fixed force, seen and unseen objects."""
    pc = p.cfg["pose_est"]
    excl = set(p.cfg["stage2"]["exclude"])
    rows = []
    for obj in pc["objects"]:
        period = p.dataset.period(obj)
        for mode in ("varying", "fixed"):
            g = _pose_generated(p, obj, mode, pc["per_object"])
            ts = TrainSet(g["images"], poses=g["poses"], periods=np.full(len(g["poses"]), period),
                          masks=g["masks"])
            for seed in pc["seeds"]:
                w = train_pose_estimator(ts, _estimator_cfg(pc, "pose"), seed)
                c, ang, n = _pose_eval(p, obj, w, pc["eval_fz_min"])
                rows.append({"object": obj, "seen": "no" if obj in excl else "yes", "mode": mode, "seed": seed,
                             "n_train": len(ts), "n_test": n, "centre_px": c, "angle_deg": ang})
                log.info("table2 %s %s seed=%d centre=%.3f angle=%.3f", obj, mode, seed, c, ang)
    write_csv(out_dir / "table2.csv", ["object", "seen", "mode", "seed", "n_train", "n_test", "centre_px",
                                       "angle_deg"], rows)
    return rows


def fig5(p: Pipeline, out_dir: Path) -> list[dict]:
    """Pose error versus the fraction of contact angles covered by the generated training set."""
    ac = p.cfg["angle_split"]
    pc = p.cfg["pose_est"]
    obj = ac["object"]
    period = p.dataset.period(obj)
    rows = []
    for frac in ac["fractions"]:
        angles = augment.angle_subset(frac, period)
        g = _pose_generated(p, obj, "varying", ac["per_split"], angles=angles, tag="fig5")
        ts = TrainSet(g["images"], poses=g["poses"], periods=np.full(len(g["poses"]), period), masks=g["masks"])
        w = train_pose_estimator(ts, _estimator_cfg(pc, "pose"), ac["seed"])
        c, ang, n = _pose_eval(p, obj, w, pc["eval_fz_min"])
        rows.append({"object": obj, "fraction": float(frac), "n_angles": len(angles), "n_test": n,
                     "centre_px": c, "angle_deg": ang})
    write_csv(out_dir / "fig5.csv", ["object", "fraction", "n_angles", "n_test", "centre_px", "angle_deg"], rows)
    return rows


def table3(p: Pipeline, out_dir: Path) -> list[dict]:
    """Object classification: generated augmentation vs geometric and geometric+colour augmentation."""
    cc = p.cfg["classify"]
    pc = p.cfg["pose_est"]
    objs = list(p.cfg["data"]["objects"])
    labels = {o: k for k, o in enumerate(objs)}
    a = p.arrays
    man = p.dataset
    refs = [man.samples.index(synth.canonical_reference(man, o, pc["fixed_fz"])) for o in objs]
    n_max = max(cc["sizes"]) // len(objs)
    s = p.cfg["sampling"]
    ms = p.cfg["data"]["max_shift"]
    key = config_hash("table3-gen", p.stage2_key, objs, n_max, ms, s["aug_steps"])

    def build():
        imgs, labs = [], []
        for o, k in zip(objs, refs):
            tfs = augment.sample_transform_grid(n_max, ms, ms, None, seed=p.seed + 1, h=p.params.h, w=p.params.w)
            forces = augment.varying_forces(n_max, p.seed + 1)
            b = augment.full_augment_arrays(a.images[k], a.backgrounds[k], a.masks[k], man.samples[k].force,
                                            man.samples[k].pose, forces, tfs, p.stage2, p.codec, p.seed,
                                            man.period(o), pairing="zip", steps=s["aug_steps"],
                                            prefix=f"table3-{o}", batch=s["batch"])
            imgs.append(b.images)
            labs.append(np.full(len(b.images), labels[o], np.int64))
        return {"images": np.concatenate(imgs).astype(np.float32), "labels": np.concatenate(labs)}
    gen = _gen_cache(p, "table3-gen", key, build)
    test = [i for i in p.indices("test", fz_min=cc["eval_fz_min"])]
    y_test = np.array([labels[man.samples[i].object_id] for i in test])
    rows = []
    for size in cc["sizes"]:
        per = size // len(objs)
        sets = {}
        sel = np.concatenate([np.flatnonzero(gen["labels"] == c)[:per] for c in range(len(objs))])
        sets["generated"] = (gen["images"][sel], gen["labels"][sel])
        for mode, name in (("geometric", "G"), ("geometric+color", "G+C")):
            sets[name] = traditional_augment(a.images[refs], a.backgrounds[refs], [labels[o] for o in objs], mode,
                                             cc["seed"], n_per_class=per)
        for model in cc["models"]:
            for aug_name in ("G", "G+C", "generated"):
                x, y = sets[aug_name]
                steps = cc["cnn_steps"] if model == "cnn" else cc["steps"]
                cfg = EstimatorConfig(task="classify", kind=model, steps=steps, batch=cc["batch"],
                                      lr=cc["lr"], dim=cc["dim"], depth=cc["depth"])
                w = train_classifier(model, TrainSet(x, labels=y), cfg, cc["seed"])
                acc = accuracy(w, a.images[test], y_test)
                rows.append({"model": model, "size": size, "augmentation": aug_name, "n_train": len(y),
                             "n_test": len(test), "accuracy": acc})
                log.info("table3 %s size=%d %s acc=%.4f", model, size, aug_name, acc)
    write_csv(out_dir / "table3.csv", ["model", "size", "augmentation", "n_train", "n_test", "accuracy"], rows)
    return rows


def generation_checks(p: Pipeline, out_dir: Path) -> dict:
    """Stage-1 / stage-2 quality reports and the mask-shift trials."""
    s1 = eval_stage1(p)
    metrics.write_report(s1["rows"], out_dir / "stage1.csv")
    s2 = eval_stage2(p)
    metrics.write_report(s2["rows"], out_dir / "stage2.csv")
    shifts = shift_trials(p)
    write_csv(out_dir / "shift.csv", ["trial", "ref", "commanded", "measured_dx", "measured_dy"], shifts)
    return {"stage1": s1["rows"], "stage2": s2["rows"], "shift": shifts}


EXPERIMENTS: dict[str, Callable[[Pipeline, Path], object]] = {
    "generation-desk": generation_checks,
    "table1-desk": table1,
    "fig4-desk": fig4,
    "fig5-desk": fig5,
    "table2-desk": table2,
    "table3-desk": table3,
}


def run_experiment(name: str, cfg: dict, run_dir: Path, cache_dir: Path | None = None):
    if name not in EXPERIMENTS:
        raise KeyError(f"unknown experiment {name!r}; choose from {sorted(EXPERIMENTS)}")
    p = Pipeline(cfg, run_dir, cache_dir)
    out = Path(run_dir)
    return EXPERIMENTS[name](p, out)
