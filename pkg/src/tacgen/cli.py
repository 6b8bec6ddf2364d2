"""Command-line entry point: ``tacgen <subcommand> [--config FILE] [--set key.path=value ...]``.

Every subcommand resolves one JSON config (a built-in profile, then the
config file, then ``--set`` overrides), validates it, and writes into a run
directory holding the resolved config, the seed, the git description, CSV
logs and outputs.  Exit codes: 0 success, 2 usage error, 3 config error,
1 runtime failure.  Failures print a single JSON line on stderr.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import shutil
import subprocess
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import augment, data, experiments, metrics, sampler, synth
from .codec import Codec
from .controlnet import PositionGenerator
from .data import ForceVector
from .diffusion import Generator
from .estimators import (EstimatorConfig, EstimatorWeights, TrainSet, accuracy, pose_errors, predict_forces,
                         predict_poses, train_classifier, train_force_estimator, train_pose_estimator,
                         trainset_from_manifest)
from .experiments import Pipeline, write_csv
from .sensor import SensorParams
from .utils import log, setup_torch

RUN_ROOT_ENV = "TACGEN_RUN_ROOT"
CACHE_ENV = "TACGEN_CACHE"
EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG = 1, 2, 3


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


# ------------------------------------------------------------------ config


def schema_for(value) -> dict:
    """JSON schema mirroring the structure and types of a default config."""
    if isinstance(value, bool):
        return {"type": "boolean"}
    if isinstance(value, int):
        return {"type": "integer"}
    if isinstance(value, float):
        return {"type": "number"}
    if isinstance(value, str):
        return {"type": "string"}
    if isinstance(value, list):
        return {"type": "array", "items": schema_for(value[0]) if value else {}}
    if isinstance(value, dict):
        if value and all(isinstance(v, int) and not isinstance(v, bool) for v in value.values()) \
                and set(value) <= set(data.SPLITS):
            return {"type": "object", "additionalProperties": {"type": "integer", "minimum": 0}}
        return {"type": "object", "properties": {k: schema_for(v) for k, v in value.items()},
                "required": sorted(value), "additionalProperties": False}
    raise TypeError(type(value))


CONFIG_SCHEMA = schema_for(experiments.DESK)


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def _apply_set(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(assignment, "override must look like key.path=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(key, "unknown config key")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(key, "unknown config key")
    node[parts[-1]] = value


def resolve_config(profile: str, config_path: str | None, sets: list[str], seed: int | None) -> dict:
    cfg = experiments.profile(profile)
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError("--config", f"config file {path} not found")
        try:
            user = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError("--config", f"invalid JSON: {e}") from e
        if not isinstance(user, dict):
            raise ConfigError("--config", "top level must be an object")
        cfg = _merge(cfg, user)
    for s in sets or []:
        _apply_set(cfg, s)
    if seed is not None:
        cfg["seed"] = seed
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    errors = sorted(jsonschema.Draft7Validator(CONFIG_SCHEMA).iter_errors(cfg), key=lambda e: list(e.path))
    if errors:
        e = errors[0]
        parts = [str(p) for p in e.path]
        if e.validator in ("required", "additionalProperties") and "'" in e.message:
            parts.append(e.message.split("'")[1])
        raise ConfigError(".".join(parts) or "<root>", e.message)


# ---------------------------------------------------------------- run dir


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def make_run_dir(args, cfg: dict) -> Path:
    if args.run_dir:
        rd = Path(args.run_dir)
    else:
        root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
        tag = args.name if getattr(args, "name", None) else args.command
        rd = root / f"{tag}-{experiments.config_hash(cfg)[:10]}"
    rd.mkdir(parents=True, exist_ok=True)
    (rd / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    (rd / "seed.txt").write_text(f"{cfg['seed']}\n")
    (rd / "git.txt").write_text(git_describe() + "\n")
    return rd


def _log_event(rd: Path, event: str, detail: str) -> None:
    path = rd / "log.csv"
    new = not path.exists()
    with open(path, "a") as fh:
        if new:
            fh.write("event,detail\n")
        fh.write(f"{event},{json.dumps(detail)}\n")


def _pipeline(args, cfg, rd: Path) -> Pipeline:
    cache = args.cache or os.environ.get(CACHE_ENV)
    inputs = {k: getattr(args, k, None) for k in ("data", "codec", "stage1", "stage2", "hybrid", "separate")}
    return Pipeline(cfg, rd, Path(cache) if cache else None, inputs)


def _force(text: str) -> ForceVector:
    vals = [float(v) for v in text.split(",")]
    if len(vals) == 1:
        vals = [0.0, 0.0, vals[0]]
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("force must be 'fz' or 'fx,fy,fz'")
    return ForceVector(*vals)


def _copy(src_dir: Path, pattern: str, dst: Path) -> None:
    hits = sorted(src_dir.glob(pattern))
    if hits:
        shutil.copyfile(hits[0], dst)


# ------------------------------------------------------------- subcommands


def cmd_synth_data(args, cfg, rd):
    dc = cfg["data"]
    out = Path(args.out) if args.out else rd / "dataset"
    sc = synth.SynthConfig(objects=tuple(dc["objects"]), positions=dict(dc["positions"]),
                           forces_per_position=dc["forces_per_position"], max_shift=dc["max_shift"],
                           shear_max=dc["shear_max"])
    man = synth.synth_dataset(out, sc, SensorParams(h=cfg["sensor"]["h"], w=cfg["sensor"]["w"]), cfg["seed"])
    _log_event(rd, "synth-data", f"{len(man)} samples -> {out}")
    print(out / "manifest.json")


def cmd_train_codec(args, cfg, rd):
    p = _pipeline(args, cfg, rd)
    p.codec.save(rd / "codec.pt")
    _copy(p.cache, f"codec-{p.codec_key}.json", rd / "codec_stats.json")
    _log_event(rd, "train-codec", p.codec.fingerprint)
    print(rd / "codec.pt")


def cmd_train_stage1(args, cfg, rd):
    p = _pipeline(args, cfg, rd)
    p.stage1.save(rd / "stage1.pt")
    _copy(p.cache, f"stage1-{p.stage1_key}-loss.csv", rd / "loss.csv")
    _log_event(rd, "train-stage1", p.stage1.fingerprint())
    print(rd / "stage1.pt")


def cmd_train_stage2(args, cfg, rd):
    p = _pipeline(args, cfg, rd)
    p.stage2.save(rd / "stage2.pt")
    _copy(p.cache, f"stage2-{p.stage2_key}-loss.csv", rd / "loss.csv")
    _log_event(rd, "train-stage2", p.stage2.base_fingerprint)
    print(rd / "stage2.pt")


def cmd_train_baseline(args, cfg, rd):
    p = _pipeline(args, cfg, rd)
    gen = p.hybrid if args.kind == "hybrid" else p.separate
    gen.save(rd / f"{args.kind}.pt")
    key = p.baseline_key if args.kind == "hybrid" else p.separate_key
    _copy(p.cache, f"{args.kind}-{key}-loss.csv", rd / "loss.csv")
    _log_event(rd, "train-baseline", args.kind)
    print(rd / f"{args.kind}.pt")


def cmd_generate(args, cfg, rd):
    codec = Codec.load(args.codec)
    ref = data.load_image(args.ref)[None]
    bg = data.load_image(args.background)
    stage1 = Generator.load(args.stage1)
    if args.mask:
        if not args.stage2:
            raise ValueError("--mask needs --stage2 weights")
        pg = PositionGenerator.load(args.stage2, stage1)
        m = data.load_mask(args.mask).astype(np.float32)[None]
        img = sampler.generate_positioned(pg, codec, ref, bg, [args.force_initial], [args.force_target], m,
                                          cfg["seed"], args.steps, args.eta, sample_ids=["cli"])
    else:
        img = sampler.generate(stage1, codec, ref, bg, [args.force_initial], [args.force_target], cfg["seed"],
                               args.steps, args.eta, sample_ids=["cli"])
    out = Path(args.out) if args.out else rd / "generated.png"
    data.save_image(out, img[0])
    _log_event(rd, "generate", str(out))
    print(out)


def cmd_augment(args, cfg, rd):
    source = data.load_manifest(args.data)
    recs = {r.id: r for r in source.samples}
    if args.ref_id not in recs:
        raise ValueError(f"reference {args.ref_id!r} not in {args.data}")
    ref = recs[args.ref_id]
    codec = Codec.load(args.codec)
    stage1 = Generator.load(args.stage1)
    out = Path(args.out) if args.out else rd / "augmented"
    steps = args.steps or cfg["sampling"]["aug_steps"]
    if args.positions:
        pg = PositionGenerator.load(args.stage2, stage1)
        ms = cfg["data"]["max_shift"]
        tfs = augment.sample_transform_grid(args.positions, ms, ms, None, cfg["seed"], source.sensor.h,
                                            source.sensor.w)
        forces = (augment.fixed_forces(1, args.fixed_force) if args.fixed_force
                  else [ForceVector(0.0, 0.0, float(f)) for f in args.forces])
        man, skipped = augment.full_augment(ref, source, forces, tfs, pg, codec, cfg["seed"], out, steps=steps)
    else:
        forces = [ForceVector(0.0, 0.0, float(f)) for f in args.forces]
        man, skipped = augment.force_augment(ref, source, forces, stage1, codec, cfg["seed"], out, steps=steps)
    _log_event(rd, "augment", f"{len(man)} records, skipped {skipped}")
    print(out / "manifest.json")


def _load_sets(paths: list[str], split: str | None, labels: dict | None) -> TrainSet:
    return TrainSet.concat([trainset_from_manifest(data.load_manifest(pth), split, labels) for pth in paths])


def cmd_train_estimator(args, cfg, rd):
    block = {"force": "force_est", "pose": "pose_est", "classify": "classify"}[args.task]
    d = cfg[block]
    ec = EstimatorConfig(task=args.task, kind=args.kind, steps=d["steps"], batch=d["batch"], lr=d["lr"],
                         dim=d["dim"], depth=d["depth"], aux_weight=d.get("aux_weight", 0.5),
                         angle_mode="degrees" if args.raw_degrees else "sincos")
    objs = sorted({r.object_id for pth in args.data for r in data.load_manifest(pth).samples})
    labels = {o: k for k, o in enumerate(objs)} if args.task == "classify" else None
    ts = _load_sets(args.data, args.split, labels)
    if args.task == "force":
        w = train_force_estimator(ts, ec, cfg["seed"])
    elif args.task == "pose":
        w = train_pose_estimator(ts, ec, cfg["seed"])
    else:
        w = train_classifier(args.kind, ts, ec, cfg["seed"])
        w.meta["classes"] = objs
    w.save(rd / "estimator.pt")
    write_csv(rd / "loss.csv", ["step", "loss"], [{"step": s, "loss": float(v)} for s, v in w.meta["curve"]])
    _log_event(rd, "train-estimator", args.task)
    print(rd / "estimator.pt")


def cmd_eval_estimator(args, cfg, rd):
    w = EstimatorWeights.load(args.weights)
    man = data.load_manifest(args.data)
    recs = man.split(args.split)
    arr = data.load_arrays(man, recs)
    rows = []
    if w.task == "force":
        pred = predict_forces(w, arr.images)
        err = np.abs(pred - arr.forces).mean(0)
        rows.append({"task": "force", "n": len(recs), "mae": float(err.mean()), "mae_fx": float(err[0]),
                     "mae_fy": float(err[1]), "mae_fz": float(err[2])})
        fields = ["task", "n", "mae", "mae_fx", "mae_fy", "mae_fz"]
    elif w.task == "pose":
        periods = np.array([man.period(r.object_id) for r in recs])
        pred = predict_poses(w, arr.images, periods)
        c, a = pose_errors(pred, arr.poses, periods)
        rows.append({"task": "pose", "n": len(recs), "centre_px": c, "angle_deg": a})
        fields = ["task", "n", "centre_px", "angle_deg"]
    else:
        classes = w.meta.get("classes", [])
        labels = np.array([classes.index(r.object_id) for r in recs])
        rows.append({"task": "classify", "n": len(recs), "accuracy": accuracy(w, arr.images, labels)})
        fields = ["task", "n", "accuracy"]
    write_csv(rd / "metrics.csv", fields, rows)
    print(rd / "metrics.csv")


def cmd_eval_generation(args, cfg, rd):
    p = _pipeline(args, cfg, rd)
    if args.models == ["stage1"]:
        r = experiments.eval_stage1(p)
        metrics.write_report(r["rows"], rd / "report.csv")
    else:
        experiments.table1(p, rd)
        shutil.copyfile(rd / "table1.csv", rd / "report.csv")
    print(rd / "report.csv")


def cmd_experiment(args, cfg, rd):
    p = _pipeline(args, cfg, rd)
    experiments.EXPERIMENTS[args.name](p, rd)
    _log_event(rd, "experiment", args.name)
    print(rd)


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tacgen", description="Controllable tactile image generation toolkit")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name, fn, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="JSON config file (partial; merged onto the profile)")
        sp.add_argument("--profile", default="desk", choices=sorted(experiments.PROFILES))
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a dotted config path, e.g. stage1.steps=2000")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--run-dir", help=f"output directory (default: ${RUN_ROOT_ENV}/<command>-<hash>)")
        sp.add_argument("--cache", help=f"artifact cache directory (default: ${CACHE_ENV} or <run-dir>/artifacts)")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("synth-data", cmd_synth_data, "render a synthetic labelled dataset")
    sp.add_argument("--out")
    for name, fn, text, extra in [
        ("train-codec", cmd_train_codec, "train the latent codec", ["data"]),
        ("train-stage1", cmd_train_stage1, "train the force-conditioned generator", ["data", "codec"]),
        ("train-stage2", cmd_train_stage2, "train the position ControlNet", ["data", "codec", "stage1"]),
    ]:
        sp = add(name, fn, text)
        for e in extra:
            sp.add_argument(f"--{e}")
    sp = add("train-baseline", cmd_train_baseline, "train the hybrid or separate baseline")
    sp.add_argument("--kind", choices=["hybrid", "separate"], required=True)
    sp.add_argument("--data")
    sp.add_argument("--codec")

    sp = add("generate", cmd_generate, "generate one tactile image")
    sp.add_argument("--ref", required=True)
    sp.add_argument("--background", required=True)
    sp.add_argument("--mask")
    sp.add_argument("--force-initial", type=_force, required=True)
    sp.add_argument("--force-target", type=_force, required=True)
    sp.add_argument("--steps", type=int, default=100)
    sp.add_argument("--eta", type=float, default=0.0)
    sp.add_argument("--out")
    sp.add_argument("--codec", required=True)
    sp.add_argument("--stage1", required=True)
    sp.add_argument("--stage2")

    sp = add("augment", cmd_augment, "augment a dataset from one reference sample")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ref-id", required=True)
    sp.add_argument("--forces", type=float, nargs="+", default=[4.0, 5.2, 6.4, 7.6, 8.8, 10.0])
    sp.add_argument("--positions", type=int, default=0, help="number of sampled contact positions (stage 2)")
    sp.add_argument("--fixed-force", type=float, help="single normal force for every position")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--out")
    sp.add_argument("--codec", required=True)
    sp.add_argument("--stage1", required=True)
    sp.add_argument("--stage2")

    sp = add("train-estimator", cmd_train_estimator, "train a force, pose or classification model")
    sp.add_argument("--task", choices=["force", "pose", "classify"], required=True)
    sp.add_argument("--kind", choices=["vit", "cnn"], default="vit")
    sp.add_argument("--data", nargs="+", required=True, help="one or more manifests (concatenated)")
    sp.add_argument("--split", default="train")
    sp.add_argument("--raw-degrees", action="store_true", help="regress the angle in degrees instead of sin/cos")

    sp = add("eval-estimator", cmd_eval_estimator, "evaluate estimator weights on a manifest split")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test")

    sp = add("eval-generation", cmd_eval_generation, "MSE/SSIM report for generators on held-out queries")
    sp.add_argument("--models", nargs="+", default=["two-stage", "hybrid", "separate"])
    for e in ("data", "codec", "stage1", "stage2", "hybrid", "separate"):
        sp.add_argument(f"--{e}")

    sp = add("experiment", cmd_experiment, "run a scripted desk-scale experiment")
    sp.add_argument("name", choices=sorted(experiments.EXPERIMENTS))
    return ap


def _fail(code: int, kind: str, message: str, **extra) -> int:
    print(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = resolve_config(args.profile, args.config, args.set, args.seed)
    except ConfigError as e:
        return _fail(EXIT_CONFIG, "config", str(e), key=e.key)
    setup_torch()
    try:
        rd = make_run_dir(args, cfg)
        args.fn(args, cfg, rd)
    except experiments.StageError as e:
        return _fail(EXIT_RUNTIME, "runtime", str(e), stage=e.stage)
    except Exception as e:  # noqa: BLE001 - every failure becomes one parsable line
        log.debug("failure", exc_info=True)
        return _fail(EXIT_RUNTIME, "runtime", f"{type(e).__name__}: {e}", stage=args.command)
    return 0


if __name__ == "__main__":
    sys.exit(main())
