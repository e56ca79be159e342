from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass
from typing import Any, Callable, Sequence

import torch
from torch import nn

from latent_protection.diffusion.autoencoder import AutoencoderBackend
from latent_protection.diffusion.process import latent_loss, split_batch
from latent_protection.diffusion.types import NoiseSchedule
from latent_protection.errors import ConfigError, NonFiniteLossError
from latent_protection.seeding import make_generator

from .adapters import adapter_parameters, attach_adapters, has_adapters, set_adapter_trainable

log = logging.getLogger("latent_protection.finetune.trainer")

FINETUNE_MODES = ("adapter", "full")
OPTIMIZERS = ("sgd", "sgd-momentum", "adamw")


@dataclass
class FinetuneConfig:
    steps: int = 10
    lr: float = 1e-5
    rank: int = 4
    mode: str = "adapter"
    condition_id: int | None = None
    optimizer: str = "sgd"
    momentum: float = 0.9
    adapter_scale: float = 1.0
    batch_size: int | None = None
    mc_samples: int = 1

    def __post_init__(self) -> None:
        if int(self.steps) < 1:
            raise ConfigError(f"finetune steps must be >= 1, got {self.steps}")
        if not float(self.lr) > 0:
            raise ConfigError(f"finetune learning rate must be > 0, got {self.lr}")
        if self.mode not in FINETUNE_MODES:
            raise ConfigError(f"finetune mode must be one of {FINETUNE_MODES}, got {self.mode!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.mode == "adapter" and int(self.rank) < 1:
            raise ConfigError(f"adapter rank must be >= 1, got {self.rank}")
        if self.batch_size is not None and int(self.batch_size) < 1:
            raise ConfigError(f"batch_size must be >= 1 or null, got {self.batch_size}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict[str, Any] | None) -> "FinetuneConfig":
        raw = dict(raw or {})
        known = {k: raw[k] for k in cls.__dataclass_fields__ if k in raw}
        return cls(**known)


def _build_optimizer(params: list[nn.Parameter], cfg: FinetuneConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.lr)
    if cfg.optimizer == "sgd-momentum":
        return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum)
    return torch.optim.AdamW(params, lr=cfg.lr)


class Finetuner:
    """
    Holds a model and its optimizer so repeated `step()` calls continue one optimization.
    The attack engine interleaves these calls with PGD; `finetune()` is the one-shot wrapper.
    """

    def __init__(self, model: nn.Module, cfg: FinetuneConfig, backend: AutoencoderBackend, sched: NoiseSchedule, seed: int):
        self.cfg = cfg
        self.backend = backend
        self.sched = sched
        self.model = model
        if cfg.mode == "adapter":
            if not has_adapters(model):
                raise ConfigError("adapter mode needs a model with adapters attached")
            set_adapter_trainable(model)
            params = adapter_parameters(model)
        else:
            for p in model.parameters():
                p.requires_grad_(True)
            params = [p for p in model.parameters()]
        self.params = params
        self.optimizer = _build_optimizer(params, cfg)
        self.gen = make_generator(seed, "finetune")
        self.steps_done = 0
        self.history: list[float] = []

    def _batch(self, latents: torch.Tensor, conds: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        size = self.cfg.batch_size
        if size is None or size >= latents.shape[0]:
            return latents, conds
        idx = torch.randint(0, latents.shape[0], (int(size),), generator=self.gen).to(latents.device)
        return latents[idx], conds[idx]

    def step(self, images: torch.Tensor, conds: torch.Tensor, n_steps: int | None = None) -> list[float]:
        """Run `n_steps` (default cfg.steps) gradient steps on the epsilon loss of `images`."""
        if images.shape[0] == 0:
            raise ConfigError("cannot finetune on an empty dataset")
        count = self.cfg.steps if n_steps is None else int(n_steps)
        if self.cfg.condition_id is not None:
            conds = torch.full_like(conds, int(self.cfg.condition_id))
        with torch.no_grad():
            latents = self.backend.encode(images.detach())
        for p in self.params:
            p.requires_grad_(True)
        self.model.train()
        losses: list[float] = []
        for _ in range(count):
            z0, cc = self._batch(latents, conds)
            loss = latent_loss(self.model, z0, cc, self.sched, self.gen, mc_samples=self.cfg.mc_samples)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(
                    f"non-finite finetune loss at step {self.steps_done}",
                    step=self.steps_done,
                    diagnostics={"loss": float(loss.detach()), "lr": self.cfg.lr, "mode": self.cfg.mode},
                )
            self.optimizer.zero_grad(set_to_none=True)
            loss.backward()
            self.optimizer.step()
            self.steps_done += 1
            losses.append(float(loss.detach()))
        self.model.eval()
        for p in self.params:
            p.requires_grad_(False)
        self.history.extend(losses)
        return losses


def prepare_model(model: nn.Module, cfg: FinetuneConfig, *, seed: int = 0) -> nn.Module:
    """Working copy ready for finetuning: adapters attached in adapter mode, plain deepcopy otherwise."""
    if cfg.mode == "adapter":
        if has_adapters(model):
            return copy.deepcopy(model)
        return attach_adapters(model, cfg.rank, scale=cfg.adapter_scale, seed=seed)
    return copy.deepcopy(model)


def finetune(
    model: nn.Module,
    dataset: Sequence[tuple[torch.Tensor, int]] | tuple[torch.Tensor, Any],
    cfg: FinetuneConfig,
    backend: AutoencoderBackend,
    sched: NoiseSchedule,
    seed: int,
    *,
    progress_callback: Callable[[str, float, str], None] | None = None,
) -> nn.Module:
    """Return a finetuned copy of `model`; the input model is not modified."""
    progress = progress_callback or (lambda phase, frac, msg: None)
    images, conds = split_batch(dataset)
    working = prepare_model(model, cfg, seed=seed)
    trainer = Finetuner(working, cfg, backend, sched, seed)
    losses = trainer.step(images, conds)
    progress("finetune", 1.0, f"{cfg.steps} steps, last loss {losses[-1]:.4f}")
    log.info("finetuned (%s, %s): %d steps, loss %.4f -> %.4f", cfg.mode, cfg.optimizer, cfg.steps, losses[0], losses[-1])
    for p in working.parameters():
        p.requires_grad_(False)
    return working
