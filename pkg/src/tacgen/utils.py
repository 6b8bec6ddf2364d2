"""Seeding, losses, optimiser setup and parameter fingerprints."""

from __future__ import annotations

import hashlib
import logging
import zlib
from typing import Iterable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger("tacgen")


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from any mix of ints and strings (order-sensitive)."""
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little") & ((1 << 63) - 1)


def torch_gen(*parts) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(*parts))


def np_rng(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


def setup_torch(threads: int = 1) -> None:
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def l1_mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """0.5 * L1 + 0.5 * MSE, the reconstruction/denoising loss used throughout."""
    return 0.5 * F.l1_loss(pred, target) + 0.5 * F.mse_loss(pred, target)


def make_optimizer(params: Iterable[nn.Parameter], lr: float, lr_min: float, steps: int,
                   weight_decay: float = 0.0):
    opt = torch.optim.AdamW(list(params), lr=lr, weight_decay=weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(steps, 1), eta_min=lr_min)
    return opt, sched


def fingerprint(module_or_state) -> str:
    """sha256 over parameter names and raw bytes; changes with any weight."""
    state = module_or_state.state_dict() if isinstance(module_or_state, nn.Module) else module_or_state
    h = hashlib.sha256()
    for k in sorted(state):
        v = state[k]
        h.update(k.encode())
        if torch.is_tensor(v):
            h.update(v.detach().cpu().contiguous().numpy().tobytes())
        else:
            h.update(repr(v).encode())
    return h.hexdigest()


def checksum(params: Iterable[torch.Tensor]) -> int:
    c = 0
    for p in params:
        c = zlib.crc32(p.detach().cpu().contiguous().numpy().tobytes(), c)
    return c


def to_nchw(x: np.ndarray) -> torch.Tensor:
    """(N, H, W, C) float array -> contiguous float32 NCHW tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.asarray(x, np.float32).transpose(0, 3, 1, 2)))


def to_nhwc(x: torch.Tensor) -> np.ndarray:
    return x.detach().cpu().numpy().transpose(0, 2, 3, 1).astype(np.float32)
