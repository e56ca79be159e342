"""
Attack objectives on a batch of candidate images x' (N, C, H, W).

All squared norms are sums over latent elements. Monte-Carlo kinds average over
`mc_samples` (t, eps) draws per image; a batch objective is the sum of per-image
values, so each image's gradient is its own objective's gradient.

    advdm            ||eps_theta(z'_t, t) - eps||^2
    ace              ||eps_theta(z'_t, t) - T||^2
    ace-plus         ace + alpha * ||z'_0 - T||^2
    encoder-target   ||z'_0 - T||^2
    diffusion-target ||chain(z'_t*) - T||^2 over a short respaced reverse chain (experimental)
"""

from __future__ import annotations

import logging
from typing import Sequence

import torch

from latent_protection.diffusion.autoencoder import AutoencoderBackend
from latent_protection.diffusion.process import forward_noise, randn_like, reverse_chain, sample_timesteps
from latent_protection.diffusion.protocols import EpsilonModel
from latent_protection.diffusion.schedule import respaced_timesteps
from latent_protection.diffusion.types import NoiseSchedule, as_batch
from latent_protection.errors import ConfigError, MissingTargetError, NonFiniteLossError, ShapeMismatchError

from .types import AttackObjective

log = logging.getLogger("latent_protection.attack.objectives")

NoiseDraw = tuple[torch.Tensor, torch.Tensor]


def _sqnorm(v: torch.Tensor) -> torch.Tensor:
    return v.pow(2).flatten(1).sum(dim=1)


def _target_for(obj: AttackObjective, z: torch.Tensor) -> torch.Tensor:
    if obj.target is None:
        raise MissingTargetError(f"objective {obj.kind} needs a target latent")
    target = obj.target.to(device=z.device, dtype=z.dtype)
    if target.dim() == 3:
        target = target.unsqueeze(0)
    if tuple(target.shape[1:]) != tuple(z.shape[1:]):
        raise ShapeMismatchError(f"target latent shape {tuple(target.shape[1:])} does not match latent shape {tuple(z.shape[1:])}")
    return target


def _conds(obj: AttackObjective, conds: torch.Tensor | int | None, n: int, device: torch.device) -> torch.Tensor:
    if obj.condition_id is not None:
        return torch.full((n,), int(obj.condition_id), dtype=torch.long, device=device)
    if conds is None:
        return torch.zeros((n,), dtype=torch.long, device=device)
    cc = torch.as_tensor(conds, dtype=torch.long, device=device).reshape(-1)
    return cc.expand(n) if cc.numel() == 1 else cc


def draw_noise(obj: AttackObjective, sched: NoiseSchedule, z_ref: torch.Tensor, gen: torch.Generator) -> list[NoiseDraw]:
    """`mc_samples` (t, eps) pairs shaped for latents like z_ref; none for encoder-target."""
    if obj.kind == "encoder-target":
        return []
    n = z_ref.shape[0]
    return [(sample_timesteps(n, sched, gen), randn_like(z_ref, gen)) for _ in range(int(obj.mc_samples))]


def objective_terms(
    obj: AttackObjective,
    model: EpsilonModel,
    backend: AutoencoderBackend,
    sched: NoiseSchedule,
    x_adv: torch.Tensor,
    gen: torch.Generator,
    *,
    conds: torch.Tensor | int | None = None,
    t: torch.Tensor | None = None,
    eps: torch.Tensor | None = None,
    draws: Sequence[NoiseDraw] | None = None,
) -> torch.Tensor:
    """
    Per-image objective values (N,), differentiable w.r.t. x_adv.

    `t`/`eps` pin a single draw; `draws` pins a whole Monte-Carlo set. Otherwise
    `mc_samples` fresh pairs come from gen.
    """
    batch, _ = as_batch(x_adv)
    n = batch.shape[0]
    z0 = backend.encode(batch)
    cc = _conds(obj, conds, n, batch.device)

    if obj.kind == "encoder-target":
        return _sqnorm(z0 - _target_for(obj, z0))

    target = _target_for(obj, z0) if obj.targeted else None
    if draws is not None and len(draws) == 0:
        raise ConfigError(f"objective {obj.kind} needs at least one noise draw")
    fixed = t is not None or eps is not None
    count = len(draws) if draws is not None else (1 if fixed else int(obj.mc_samples))
    total = z0.new_zeros((n,))
    for d in range(count):
        if draws is not None:
            tt, ee = draws[d]
            ee = ee.to(device=z0.device, dtype=z0.dtype)
        else:
            tt = t if t is not None else sample_timesteps(n, sched, gen)
            ee = as_batch(eps)[0].to(device=z0.device, dtype=z0.dtype) if eps is not None else randn_like(z0, gen)
        if obj.kind == "diffusion-target":
            start = min(int(obj.diffusion_start), sched.T - 1)
            z_t = forward_noise(z0, start, ee, sched)
            chain = respaced_timesteps(sched, obj.diffusion_steps, start=start)
            out = reverse_chain(model, sched, z_t, chain, cc, gen)
            total = total + _sqnorm(out - target)
            continue
        tt = tt.to(z0.device)
        z_t = forward_noise(z0, tt, ee, sched)
        pred = model(z_t, tt, cc)
        if obj.kind == "advdm":
            total = total + _sqnorm(pred - ee)
        else:
            total = total + _sqnorm(pred - target)
    value = total / count
    if obj.kind == "ace-plus":
        value = value + obj.fusion_weight * _sqnorm(z0 - target)
    return value


def objective_value_and_gradient(
    obj: AttackObjective,
    model: EpsilonModel,
    backend: AutoencoderBackend,
    sched: NoiseSchedule,
    x_adv: torch.Tensor,
    rng: torch.Generator,
    *,
    conds: torch.Tensor | int | None = None,
    t: torch.Tensor | None = None,
    eps: torch.Tensor | None = None,
    draws: Sequence[NoiseDraw] | None = None,
) -> tuple[float, torch.Tensor]:
    value, grad, _ = terms_and_gradient(obj, model, backend, sched, x_adv, rng, conds=conds, t=t, eps=eps, draws=draws)
    return value, grad


def terms_and_gradient(
    obj: AttackObjective,
    model: EpsilonModel,
    backend: AutoencoderBackend,
    sched: NoiseSchedule,
    x_adv: torch.Tensor,
    rng: torch.Generator,
    *,
    conds: torch.Tensor | int | None = None,
    t: torch.Tensor | None = None,
    eps: torch.Tensor | None = None,
    draws: Sequence[NoiseDraw] | None = None,
) -> tuple[float, torch.Tensor, torch.Tensor]:
    """(summed value, gradient shaped like x_adv, detached per-image terms)."""
    x = x_adv.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        terms = objective_terms(obj, model, backend, sched, x, rng, conds=conds, t=t, eps=eps, draws=draws)
        total = terms.sum()
        if not torch.isfinite(total):
            raise NonFiniteLossError(
                f"non-finite {obj.kind} objective",
                diagnostics={"kind": obj.kind, "terms": terms.detach().tolist()},
            )
        (grad,) = torch.autograd.grad(total, x)
    return float(total.detach()), grad.detach(), terms.detach()
