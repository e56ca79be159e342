"""Backbone checkpoints: UNet weights plus the schedule and autoencoder they were trained against."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import torch
from torch import nn

from latent_protection.diffusion.autoencoder import AutoencoderBackend, autoencoder_from_info
from latent_protection.diffusion.schedule import schedule_from_metadata
from latent_protection.diffusion.types import NoiseSchedule
from latent_protection.diffusion.unet import ToyUNet, UNetConfig
from latent_protection.errors import ChecksumMismatchError, UnsupportedVersionError
from latent_protection.hashing import state_dict_hash

log = logging.getLogger("latent_protection.io.checkpoints")

CHECKPOINT_FORMAT = "lpt-backbone"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    model: ToyUNet
    backend: nn.Module
    sched: NoiseSchedule
    model_hash: str
    metadata: dict[str, Any] = field(default_factory=dict)


def save_checkpoint(
    path: Path | str,
    model: ToyUNet,
    backend: AutoencoderBackend,
    sched: NoiseSchedule,
    *,
    metadata: dict[str, Any] | None = None,
) -> str:
    """Write the checkpoint and return the model's state hash."""
    model_hash = state_dict_hash(model)
    info = backend.info()
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "unet": model.config.to_dict(),
        "schedule": sched.metadata(),
        "backend": {**info.__dict__, "extra": dict(info.extra)},
        "backend_state": {k: v.detach().cpu() for k, v in backend.state_dict().items()},
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "model_hash": model_hash,
        "metadata": dict(metadata or {}),
    }
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, out)
    log.info("saved backbone checkpoint %s (hash %s)", out, model_hash[:12])
    return model_hash


def load_checkpoint(path: Path | str) -> Checkpoint:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise UnsupportedVersionError(f"{path} is not a backbone checkpoint")
    if int(payload.get("version", -1)) != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"checkpoint version {payload.get('version')} is not supported")
    model = ToyUNet(UNetConfig(**payload["unet"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    model_hash = state_dict_hash(model)
    if model_hash != payload["model_hash"]:
        raise ChecksumMismatchError(f"{path}: weights hash {model_hash[:12]} != recorded {payload['model_hash'][:12]}")
    backend = autoencoder_from_info(payload["backend"])
    backend.load_state_dict(payload["backend_state"])
    backend.eval()
    for p in list(model.parameters()) + list(backend.parameters()):
        p.requires_grad_(False)
    return Checkpoint(
        model=model,
        backend=backend,
        sched=schedule_from_metadata(payload["schedule"]),
        model_hash=model_hash,
        metadata=dict(payload.get("metadata") or {}),
    )
