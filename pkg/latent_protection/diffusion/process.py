"""
Forward noising, the epsilon-prediction loss, ancestral sampling and SDEdit.

Noise-prediction convention throughout: the regression target of the model (the
"ground truth score" in this package) is the injected noise eps itself.
"""

from __future__ import annotations

import logging
import math
from typing import Callable, Sequence

import torch

from latent_protection.errors import ConfigError, ShapeMismatchError
from latent_protection.seeding import make_generator

from .autoencoder import AutoencoderBackend
from .protocols import EpsilonModel
from .schedule import respaced_timesteps
from .types import NoiseSchedule, as_batch, check_same_shape

log = logging.getLogger("latent_protection.diffusion.process")

ConditionIds = int | Sequence[int] | torch.Tensor


def randn_like(ref: torch.Tensor, gen: torch.Generator, shape: Sequence[int] | None = None) -> torch.Tensor:
    """Standard normal draw from a CPU generator, moved to ref's device and dtype."""
    out = torch.randn(tuple(shape if shape is not None else ref.shape), generator=gen, dtype=torch.float64)
    return out.to(device=ref.device, dtype=ref.dtype)


def sample_timesteps(n: int, sched: NoiseSchedule, gen: torch.Generator) -> torch.Tensor:
    return torch.randint(0, sched.T, (int(n),), generator=gen)


def forward_noise(z0: torch.Tensor, t: int | torch.Tensor, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    check_same_shape(z0, eps, "z0 and eps")
    ab = sched.gather(sched.alpha_bar, t, z0)
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps


def ground_truth_target(eps: torch.Tensor) -> torch.Tensor:
    return eps


def _cond_tensor(cond: ConditionIds, n: int, device: torch.device) -> torch.Tensor:
    cc = torch.as_tensor(cond, dtype=torch.long, device=device).reshape(-1)
    if cc.numel() == 1:
        cc = cc.expand(n)
    if cc.numel() != n:
        raise ShapeMismatchError(f"{cc.numel()} condition ids for a batch of {n}")
    return cc


def latent_loss(
    model: EpsilonModel,
    z0: torch.Tensor,
    cond: ConditionIds,
    sched: NoiseSchedule,
    gen: torch.Generator,
    *,
    mc_samples: int = 1,
    t: torch.Tensor | None = None,
    eps: torch.Tensor | None = None,
) -> torch.Tensor:
    """
    Mean over the batch and `mc_samples` (t, eps) draws of ||model(z_t, t, c) - eps||^2.

    Fixed `t` (N,) and `eps` (N, c, h, w) may be passed in for finite-difference checks;
    they then stand in for a single draw.
    """
    batch, _ = as_batch(z0)
    n = batch.shape[0]
    if n == 0:
        raise ConfigError("cannot compute the loss of an empty batch")
    cc = _cond_tensor(cond, n, batch.device)
    draws = 1 if (t is not None or eps is not None) else max(1, int(mc_samples))
    total = batch.new_zeros(())
    for _ in range(draws):
        tt = t if t is not None else sample_timesteps(n, sched, gen)
        ee = eps if eps is not None else randn_like(batch, gen)
        ee, _ = as_batch(ee)
        z_t = forward_noise(batch, tt, ee, sched)
        pred = model(z_t, tt.to(batch.device), cc)
        total = total + (pred - ground_truth_target(ee)).pow(2).flatten(1).sum(dim=1).mean()
    return total / draws


def ldm_loss(
    model: EpsilonModel,
    batch: Sequence[tuple[torch.Tensor, int]] | tuple[torch.Tensor, ConditionIds],
    backend: AutoencoderBackend,
    sched: NoiseSchedule,
    rng: torch.Generator | int,
    *,
    mc_samples: int = 1,
) -> torch.Tensor:
    """Training loss on images: encode, then latent_loss. `batch` is [(image, cond), ...] or (images, conds)."""
    images, conds = split_batch(batch)
    gen = rng if isinstance(rng, torch.Generator) else make_generator(int(rng), "loss")
    z0 = backend.encode(images)
    return latent_loss(model, z0, conds, sched, gen, mc_samples=mc_samples)


def split_batch(batch) -> tuple[torch.Tensor, torch.Tensor]:
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], torch.Tensor) and batch[0].dim() == 4:
        images = batch[0]
        conds = _cond_tensor(batch[1], images.shape[0], images.device)
        return images, conds
    items = list(batch)
    if not items:
        raise ConfigError("empty batch")
    images = torch.stack([img for img, _ in items])
    conds = torch.tensor([int(c) for _, c in items], dtype=torch.long, device=images.device)
    return images, conds


def reverse_chain(
    model: EpsilonModel,
    sched: NoiseSchedule,
    z: torch.Tensor,
    timesteps: Sequence[int],
    cond: ConditionIds,
    gen: torch.Generator,
    *,
    progress_callback: Callable[[str, float, str], None] | None = None,
) -> torch.Tensor:
    """
    Ancestral updates along a descending timestep sequence ending at 0.

    Each hop t -> prev uses the respaced beta' = 1 - abar_t / abar_prev and the posterior
    variance beta' (1 - abar_prev) / (1 - abar_t); the final hop adds no noise.
    """
    progress = progress_callback or (lambda phase, frac, msg: None)
    batch, single = as_batch(z)
    cc = _cond_tensor(cond, batch.shape[0], batch.device)
    steps = list(int(t) for t in timesteps)
    for i, t in enumerate(steps):
        sched.check_timestep(t)
        prev = steps[i + 1] if i + 1 < len(steps) else -1
        ab_t = sched.alpha_bar[t].item()
        ab_prev = sched.alpha_bar[prev].item() if prev >= 0 else 1.0
        beta = 1.0 - ab_t / ab_prev
        eps = model(batch, t, cc)
        batch = (batch - (beta / math.sqrt(1.0 - ab_t)) * eps) / math.sqrt(1.0 - beta)
        if prev >= 0:
            var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
            batch = batch + math.sqrt(var) * randn_like(batch, gen)
        progress("sample", (i + 1) / len(steps), f"t={t}")
    return batch[0] if single else batch


@torch.no_grad()
def sample(
    model: EpsilonModel,
    sched: NoiseSchedule,
    steps: int,
    cond: ConditionIds,
    seed: int,
    *,
    shape: Sequence[int],
    n: int | None = None,
    device: str | torch.device = "cpu",
    dtype: torch.dtype = torch.float32,
    progress_callback: Callable[[str, float, str], None] | None = None,
) -> torch.Tensor:
    """Draw latents of `shape` (c, h, w) from pure noise; `n` adds a batch dimension."""
    if int(steps) <= 0:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    if int(steps) > sched.T:
        raise ConfigError(f"steps ({steps}) exceeds the schedule length T={sched.T}")
    gen = make_generator(seed, "sample")
    full = (int(n), *shape) if n is not None else tuple(shape)
    z = torch.randn(full, generator=gen, dtype=torch.float64).to(device=device, dtype=dtype)
    timesteps = respaced_timesteps(sched, int(steps))
    return reverse_chain(model, sched, z, timesteps, cond, gen, progress_callback=progress_callback)


def sdedit_start_timestep(strength: float, T: int) -> int:
    if not (0.0 < float(strength) < 1.0):
        raise ConfigError(f"SDEdit strength must be in (0, 1), got {strength}")
    return min(T - 1, max(0, int(math.floor(float(strength) * T + 0.5))))


@torch.no_grad()
def sdedit(
    model: EpsilonModel,
    backend: AutoencoderBackend,
    sched: NoiseSchedule,
    x: torch.Tensor,
    strength: float,
    cond: ConditionIds,
    seed: int,
    *,
    steps: int | None = None,
    progress_callback: Callable[[str, float, str], None] | None = None,
) -> torch.Tensor:
    """Encode x, noise to t* = round(strength * T), run the chain back to 0 and decode."""
    t_start = sdedit_start_timestep(strength, sched.T)
    gen = make_generator(seed, "sdedit")
    z0 = backend.encode(x)
    z_t = forward_noise(z0, t_start, randn_like(z0, gen), sched)
    timesteps = list(range(t_start, -1, -1)) if steps is None else respaced_timesteps(sched, steps, start=t_start)
    log.debug("sdedit from t*=%d over %d steps", t_start, len(timesteps))
    z_out = reverse_chain(model, sched, z_t, timesteps, cond, gen, progress_callback=progress_callback)
    return backend.decode(z_out, clamp=True)
