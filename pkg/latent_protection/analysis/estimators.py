"""
Monte-Carlo estimators of attack-induced score errors and finetuning biases.

Every estimator draws one set of noises and reuses it across all of its model
evaluations (common random numbers), so paired differences cancel exactly when their
inputs coincide.
"""

from __future__ import annotations

import logging
from typing import Mapping

import torch

from latent_protection.diffusion.autoencoder import AutoencoderBackend
from latent_protection.diffusion.process import forward_noise, ground_truth_target
from latent_protection.diffusion.protocols import EpsilonModel
from latent_protection.diffusion.types import NoiseSchedule, check_same_shape
from latent_protection.errors import ConfigError, ShapeMismatchError
from latent_protection.hashing import sha256_tensor
from latent_protection.seeding import make_generator

from .types import BiasField

log = logging.getLogger("latent_protection.analysis.estimators")

# Model evaluations per forward call; bounds memory for large mc.
CHUNK = 64


def _noised(x: torch.Tensor, t: int, eps: torch.Tensor, backend: AutoencoderBackend, sched: NoiseSchedule) -> torch.Tensor:
    z0 = backend.encode(x.unsqueeze(0) if x.dim() == 3 else x)
    if z0.shape[0] != 1:
        raise ShapeMismatchError("estimators take one image at a time")
    return forward_noise(z0.expand(eps.shape[0], *z0.shape[1:]), t, eps, sched)


def _draws(mc: int, like: torch.Tensor, backend: AutoencoderBackend, seed: int, name: str) -> torch.Tensor:
    c = backend.latent_channels
    h, w = like.shape[-2] // backend.factor, like.shape[-1] // backend.factor
    gen = make_generator(seed, name)
    return torch.randn((int(mc), c, h, w), generator=gen, dtype=torch.float64).to(device=like.device, dtype=like.dtype)


def _mean_pred(model: EpsilonModel, z_t: torch.Tensor, t: int, cond: int) -> torch.Tensor:
    total = None
    for start in range(0, z_t.shape[0], CHUNK):
        chunk = model(z_t[start:start + CHUNK], t, cond).sum(dim=0)
        total = chunk if total is None else total + chunk
    return total / z_t.shape[0]


def _validate(t: int, mc: int, sched: NoiseSchedule) -> None:
    sched.check_timestep(int(t))
    if int(mc) < 1:
        raise ConfigError(f"mc must be >= 1, got {mc}")


@torch.no_grad()
def estimate_eps_adv(
    theta: EpsilonModel,
    x: torch.Tensor,
    x_adv: torch.Tensor,
    t: int,
    mc: int,
    backend: AutoencoderBackend,
    sched: NoiseSchedule,
    seed: int,
    *,
    cond: int = 0,
) -> BiasField:
    """Extra score error: E[eps_theta(z'_t, t)] - E[eps_theta(z_t, t)] with shared noise."""
    _validate(t, mc, sched)
    check_same_shape(x, x_adv, "x and x_adv")
    eps = _draws(mc, x, backend, seed, f"eps_adv:{t}")
    z_t = _noised(x, t, eps, backend, sched)
    z_adv_t = _noised(x_adv, t, eps, backend, sched)
    data = _mean_pred(theta, z_adv_t, t, cond) - _mean_pred(theta, z_t, t, cond)
    return BiasField(
        data=data.detach().cpu(),
        timestep=int(t),
        mc_samples=int(mc),
        kind="eps_adv",
        sources={"x": sha256_tensor(x), "x_adv": sha256_tensor(x_adv)},
    )


@torch.no_grad()
def estimate_reverse_bias(
    theta: EpsilonModel,
    theta_star: EpsilonModel,
    phi: EpsilonModel,
    x: torch.Tensor,
    x_adv: torch.Tensor,
    t: int,
    mc: int,
    backend: AutoencoderBackend,
    sched: NoiseSchedule,
    seed: int,
    *,
    cond: int = 0,
) -> BiasField:
    """
    Reverse bias learned by adversarial finetuning:
    E[eps_phi(z'_t) - eps_theta(z'_t)] - E[eps_theta*(z_t) - eps_theta(z_t)].
    phi is finetuned on adversarial images, theta* on their clean counterparts.
    """
    _validate(t, mc, sched)
    check_same_shape(x, x_adv, "x and x_adv")
    eps = _draws(mc, x, backend, seed, f"reverse_bias:{t}")
    z_t = _noised(x, t, eps, backend, sched)
    z_adv_t = _noised(x_adv, t, eps, backend, sched)
    adv_shift = _mean_pred(phi, z_adv_t, t, cond) - _mean_pred(theta, z_adv_t, t, cond)
    clean_shift = _mean_pred(theta_star, z_t, t, cond) - _mean_pred(theta, z_t, t, cond)
    return BiasField(
        data=(adv_shift - clean_shift).detach().cpu(),
        timestep=int(t),
        mc_samples=int(mc),
        kind="reverse_bias",
        sources={"x": sha256_tensor(x), "x_adv": sha256_tensor(x_adv)},
    )


@torch.no_grad()
def estimate_sampling_bias(
    phi: EpsilonModel,
    x_holdout: torch.Tensor,
    t: int,
    mc: int,
    backend: AutoencoderBackend,
    sched: NoiseSchedule,
    seed: int,
    *,
    cond: int = 0,
) -> BiasField:
    """Prediction bias of phi on an image it was not finetuned on: E[eps_phi(z_t, t) - eps]."""
    _validate(t, mc, sched)
    eps = _draws(mc, x_holdout, backend, seed, f"sampling_bias:{t}")
    z_t = _noised(x_holdout, t, eps, backend, sched)
    total = None
    for start in range(0, z_t.shape[0], CHUNK):
        diff = phi(z_t[start:start + CHUNK], t, cond) - ground_truth_target(eps[start:start + CHUNK])
        total = diff.sum(dim=0) if total is None else total + diff.sum(dim=0)
    return BiasField(
        data=(total / z_t.shape[0]).detach().cpu(),
        timestep=int(t),
        mc_samples=int(mc),
        kind="sampling_bias",
        sources={"x_holdout": sha256_tensor(x_holdout)},
    )


def accumulate_sampling_error(bias_fields: Mapping[int, BiasField], sched: NoiseSchedule) -> BiasField:
    """Beta-weighted sum over timesteps: sum_t beta_t * B(t)."""
    if not bias_fields:
        raise ConfigError("need at least one sampling-bias field")
    items = sorted(bias_fields.items())
    shape = items[0][1].shape
    total = torch.zeros(shape, dtype=torch.float64)
    for t, fld in items:
        sched.check_timestep(int(t))
        if fld.shape != shape:
            raise ShapeMismatchError(f"field at t={t} has shape {fld.shape}, expected {shape}")
        total = total + float(sched.beta[int(t)]) * fld.data.to(torch.float64)
    return BiasField(
        data=total.to(items[0][1].data.dtype),
        timestep=None,
        mc_samples=min(int(f.mc_samples) for _, f in items),
        kind="sampling_error",
        sources={"timesteps": ",".join(str(int(t)) for t, _ in items)},
    )
