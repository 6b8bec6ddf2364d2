"""Small shared builders for the unit tests."""

import torch

from tacgen.diffusion import DiT, DiTConfig, Generator, NoiseSchedule


def tiny_generator(mode="force-only", depth=2, dim=16, heads=2, size=8, channels=4, target="eps",
                   seed=0, scramble=True, T=50, dtype=torch.float32) -> Generator:
    """A randomly initialised DiT; ``scramble`` also perturbs the zero-initialised layers."""
    torch.manual_seed(seed)
    cfg = DiTConfig(latent_channels=channels, latent_size=size, patch=2, depth=depth, dim=dim, heads=heads,
                    force_dim=8, mode=mode, target=target)
    model = DiT(cfg).to(dtype)
    if scramble:
        g = torch.Generator().manual_seed(seed + 1)
        with torch.no_grad():
            for p in model.parameters():
                p.add_(0.1 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    model.eval()
    return Generator(model, NoiseSchedule(T=T), "codec-fp")


def latents(n, channels=4, size=8, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.randn((n, channels, size, size), generator=g, dtype=dtype)
