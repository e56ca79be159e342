from __future__ import annotations

import logging
from typing import Callable

import torch

from latent_protection.errors import ConfigError, NonFiniteLossError
from latent_protection.seeding import make_generator

from .autoencoder import AutoencoderBackend
from .process import latent_loss
from .types import NoiseSchedule

log = logging.getLogger("latent_protection.diffusion.training")


def pretrain_backbone(
    model: torch.nn.Module,
    images: torch.Tensor,
    conds: torch.Tensor,
    backend: AutoencoderBackend,
    sched: NoiseSchedule,
    *,
    steps: int = 3000,
    lr: float = 2e-4,
    batch_size: int = 32,
    seed: int = 0,
    progress_callback: Callable[[str, float, str], None] | None = None,
) -> list[float]:
    """Toy backbone recipe: AdamW on the epsilon loss over minibatches of pre-encoded latents."""
    progress = progress_callback or (lambda phase, frac, msg: None)
    if images.shape[0] == 0:
        raise ConfigError("cannot pretrain on an empty dataset")
    with torch.no_grad():
        latents = backend.encode(images)
    conds = conds.to(latents.device)
    gen = make_generator(seed, "pretrain")
    opt = torch.optim.AdamW(model.parameters(), lr=lr)
    model.train()
    history: list[float] = []
    report_every = max(1, steps // 20)
    for step in range(int(steps)):
        idx = torch.randint(0, latents.shape[0], (min(batch_size, latents.shape[0]),), generator=gen).to(latents.device)
        loss = latent_loss(model, latents[idx], conds[idx], sched, gen)
        if not torch.isfinite(loss):
            raise NonFiniteLossError("non-finite pretraining loss", step=step, diagnostics={"lr": lr})
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
        if step % report_every == 0 or step == steps - 1:
            progress("pretrain", (step + 1) / steps, f"step {step + 1}/{steps} loss {history[-1]:.4f}")
    model.eval()
    log.info("backbone pretrained: %d steps, final loss %.4f", steps, history[-1] if history else float("nan"))
    return history
