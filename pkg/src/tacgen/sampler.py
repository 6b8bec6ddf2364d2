"""Deterministic DDIM sampling and the end-to-end generation entry points."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from . import data
from .codec import Codec
from .data import ForceVector
from .diffusion import Generator, NoiseSchedule, split_prediction
from .utils import torch_gen


class SamplingError(RuntimeError):
    pass


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Uniformly strided subsequence tau_1 < ... < tau_S = T (tau_0 = 0 implied)."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must lie in [1, {T}]")
    return np.array([((i + 1) * T) // steps for i in range(steps)], dtype=np.int64)


@dataclass(frozen=True)
class StepCoefficients:
    t: int
    t_prev: int
    coef_x0: float
    coef_xt: float
    sigma: float


def ddim_coefficients(schedule: NoiseSchedule, steps: int, eta: float) -> list[StepCoefficients]:
    """Per-step update x_prev = coef_x0 * x0_hat + coef_xt * x_t + sigma * z, from t = T downwards."""
    if eta < 0:
        raise ValueError("eta must be non-negative")
    ab = schedule.alpha_bar
    taus = ddim_timesteps(schedule.T, steps)
    prev = np.concatenate([[0], taus[:-1]])
    out = []
    for t, tp in zip(taus[::-1], prev[::-1]):
        a_t, a_p = ab[t], ab[tp]
        sigma = eta * np.sqrt((1 - a_p) / (1 - a_t)) * np.sqrt(1 - a_t / a_p)
        dir_coef = np.sqrt(max(1 - a_p - sigma ** 2, 0.0))
        coef_xt = dir_coef / np.sqrt(1 - a_t)
        coef_x0 = np.sqrt(a_p) - coef_xt * np.sqrt(a_t)
        out.append(StepCoefficients(int(t), int(tp), float(coef_x0), float(coef_xt), float(sigma)))
    return out


def ddpm_posterior_coefficients(schedule: NoiseSchedule, t: int) -> tuple[float, float, float]:
    """(mean coefficient on x0, mean coefficient on x_t, variance) of q(x_{t-1} | x_t, x0)."""
    ab = schedule.alpha_bar
    beta = schedule.betas[t - 1]
    alpha = 1.0 - beta
    c0 = np.sqrt(ab[t - 1]) * beta / (1 - ab[t])
    ct = np.sqrt(alpha) * (1 - ab[t - 1]) / (1 - ab[t])
    var = beta * (1 - ab[t - 1]) / (1 - ab[t])
    return float(c0), float(ct), float(var)


def initial_noise(shape: Sequence[int], seed: int, sample_ids: Sequence[str]) -> tuple[torch.Tensor, list]:
    """Starting latents plus one generator per sample, both keyed by (seed, sample id)."""
    gens = [torch_gen(seed, "sample", sid) for sid in sample_ids]
    z = torch.stack([torch.randn(tuple(shape), generator=g) for g in gens])
    return z, gens


@torch.no_grad()
def ddim_sample(denoise: Callable[[torch.Tensor, torch.Tensor], torch.Tensor], schedule: NoiseSchedule,
                target: str, shape: Sequence[int], sample_ids: Sequence[str], seed: int,
                steps: int = 50, eta: float = 0.0) -> torch.Tensor:
    """Run the reverse process for every sample; ``denoise(z_t, t)`` returns raw model output.

    With eta = 0 the result depends only on (seed, sample id, conditioning).
    """
    z, gens = initial_noise(shape, seed, sample_ids)
    ab_all = torch.as_tensor(schedule.alpha_bar, dtype=torch.float64)
    for k, sc in enumerate(ddim_coefficients(schedule, steps, eta)):
        t = torch.full((z.shape[0],), sc.t, dtype=torch.long)
        out = denoise(z, t)
        ab = ab_all[sc.t].to(z.dtype)
        x0, _ = split_prediction(out, z, ab, target)
        z = sc.coef_x0 * x0 + sc.coef_xt * z
        if sc.sigma > 0:
            z = z + sc.sigma * torch.stack([torch.randn(tuple(shape), generator=g) for g in gens])
        if not torch.isfinite(z).all():
            raise SamplingError(f"non-finite latent at sampling step {k} (t={sc.t})")
    return z


def _forces(fs: Sequence[ForceVector] | np.ndarray) -> torch.Tensor:
    if isinstance(fs, np.ndarray):
        return torch.as_tensor(fs, dtype=torch.float32).reshape(-1, 3)
    return torch.from_numpy(np.array([f.as_array() for f in fs], np.float32).reshape(-1, 3))


def _ids(n: int, sample_ids: Sequence[str] | None) -> list[str]:
    return [str(i) for i in range(n)] if sample_ids is None else [str(s) for s in sample_ids]


def _diffs(refs: np.ndarray, bgs: np.ndarray) -> np.ndarray:
    refs = np.asarray(refs, np.float32)
    bgs = np.broadcast_to(np.asarray(bgs, np.float32), refs.shape)
    return np.stack([data.subtract_background(r, b) for r, b in zip(refs, bgs)])


def _finish(codec: Codec, z: torch.Tensor, bgs: np.ndarray) -> np.ndarray:
    diff = codec.decode(z)
    bgs = np.broadcast_to(np.asarray(bgs, np.float32), diff.shape)
    return np.stack([data.add_background(d, b) for d, b in zip(diff, bgs)])


def _batched(fn, n: int, batch: int):
    outs = [fn(slice(i, min(i + batch, n))) for i in range(0, n, batch)]
    return torch.cat(outs)


def sample_force_latents(gen: Generator, codec: Codec, z_ref: torch.Tensor, dF: torch.Tensor,
                         ids: Sequence[str], seed: int, steps: int, eta: float, batch: int = 64) -> torch.Tensor:
    gen.check_codec(codec.fingerprint)
    model = gen.model.eval()
    shape = tuple(z_ref.shape[1:])

    def run(s):
        return ddim_sample(lambda z, t: model(z, t, z_ref[s], dF[s]), gen.schedule, model.cfg.target,
                           shape, ids[s], seed, steps, eta)
    return _batched(run, len(ids), batch)


def generate(gen: Generator, codec: Codec, refs: np.ndarray, backgrounds: np.ndarray,
             f_initial, f_target, seed: int, steps: int = 50, eta: float = 0.0,
             sample_ids: Sequence[str] | None = None, batch: int = 64) -> np.ndarray:
    """Force-conditioned generation: reference images (N, H, W, 3) -> images at the target forces."""
    refs = np.asarray(refs, np.float32)
    ids = _ids(len(refs), sample_ids)
    dF = _forces(f_target) - _forces(f_initial)
    z_ref = codec.encode(_diffs(refs, backgrounds))
    z = sample_force_latents(gen, codec, z_ref, dF, ids, seed, steps, eta, batch)
    return _finish(codec, z, backgrounds)


def generate_positioned(pg, codec: Codec, refs: np.ndarray, backgrounds: np.ndarray, f_initial, f_target,
                        target_masks: np.ndarray, seed: int, steps: int = 50, eta: float = 0.0,
                        sample_ids: Sequence[str] | None = None, batch: int = 64) -> np.ndarray:
    """Two-stage generation with the position ControlNet (``pg`` is a PositionGenerator)."""
    if pg.codec_fingerprint != codec.fingerprint:
        raise SamplingError("codec fingerprint mismatch")
    refs = np.asarray(refs, np.float32)
    ids = _ids(len(refs), sample_ids)
    dF = _forces(f_target) - _forces(f_initial)
    z_ref = codec.encode(_diffs(refs, backgrounds))
    z_mask = codec.encode(np.asarray(target_masks, np.float32))
    pg.eval()
    shape = tuple(z_ref.shape[1:])

    def run(s):
        return ddim_sample(lambda z, t: pg(z, t, z_ref[s], dF[s], z_mask=z_mask[s]), pg.schedule, pg.cfg.target,
                           shape, ids[s], seed, steps, eta)
    return _finish(codec, _batched(run, len(ids), batch), backgrounds)


def generate_hybrid(gen: Generator, codec: Codec, refs, backgrounds, f_initial, f_target, target_masks,
                    seed: int, steps: int = 50, eta: float = 0.0, sample_ids=None, batch: int = 64) -> np.ndarray:
    """Single-stage baseline: reference, target mask and force all fed to one DiT."""
    gen.check_codec(codec.fingerprint)
    refs = np.asarray(refs, np.float32)
    ids = _ids(len(refs), sample_ids)
    dF = _forces(f_target) - _forces(f_initial)
    z_ref = codec.encode(_diffs(refs, backgrounds))
    z_mask = codec.encode(np.asarray(target_masks, np.float32))
    model = gen.model.eval()
    shape = tuple(z_ref.shape[1:])

    def run(s):
        return ddim_sample(lambda z, t: model(z, t, z_ref[s], dF[s], z_mask=z_mask[s]), gen.schedule,
                           model.cfg.target, shape, ids[s], seed, steps, eta)
    return _finish(codec, _batched(run, len(ids), batch), backgrounds)


def generate_separate(stage1: Generator, position: Generator, codec: Codec, refs, backgrounds, f_initial,
                      f_target, target_masks, seed: int, steps: int = 50, eta: float = 0.0,
                      sample_ids=None, batch: int = 64) -> np.ndarray:
    """Baseline chaining the stage-1 model with an independently trained position model."""
    position.check_codec(codec.fingerprint)
    refs = np.asarray(refs, np.float32)
    ids = _ids(len(refs), sample_ids)
    dF = _forces(f_target) - _forces(f_initial)
    z_ref = codec.encode(_diffs(refs, backgrounds))
    z_force = sample_force_latents(stage1, codec, z_ref, dF, ids, seed, steps, eta, batch)
    z_mask = codec.encode(np.asarray(target_masks, np.float32))
    model = position.model.eval()
    shape = tuple(z_ref.shape[1:])
    ids2 = [f"{i}/position" for i in ids]

    def run(s):
        return ddim_sample(lambda z, t: model(z, t, z_force[s], None, z_mask=z_mask[s]), position.schedule,
                           model.cfg.target, shape, ids2[s], seed, steps, eta)
    return _finish(codec, _batched(run, len(ids), batch), backgrounds)
