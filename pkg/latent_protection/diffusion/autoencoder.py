"""
Autoencoder backends mapping (N, C, H, W) images in [0, 1] to (N, c, H/f, W/f) latents.

Two backends share one surface:
  - AnalyticAutoencoder: per-channel orthonormal Hadamard transform over f x f patches.
    Exact inverse, so decode(encode(x)) == x up to float rounding. Latent channels are
    C*f*f, ordered component-major with the DC component of every colour channel first.
  - ConvAutoencoder: a tiny strided conv encoder/decoder trained by train_autoencoder().
"""

from __future__ import annotations

import logging
import math
from typing import Callable, Protocol, runtime_checkable

import torch
import torch.nn.functional as F
from torch import nn

from latent_protection.errors import ConfigError, ShapeMismatchError
from latent_protection.seeding import make_generator

from .types import AutoencoderInfo, as_batch, check_image

log = logging.getLogger("latent_protection.diffusion.autoencoder")


@runtime_checkable
class AutoencoderBackend(Protocol):
    kind: str
    factor: int
    latent_channels: int
    image_channels: int

    def encode(self, x: torch.Tensor) -> torch.Tensor: ...

    def decode(self, z: torch.Tensor, *, clamp: bool = True) -> torch.Tensor: ...

    def info(self) -> AutoencoderInfo: ...


def _check_factor(factor: int) -> int:
    f = int(factor)
    if f < 1 or f & (f - 1):
        raise ConfigError(f"downsampling factor must be a power of two, got {factor}")
    return f


def sylvester_hadamard(n: int, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Unnormalized +/-1 Hadamard matrix of order n (a power of two); row 0 is all ones."""
    if n < 1 or n & (n - 1):
        raise ConfigError(f"Hadamard order must be a power of two, got {n}")
    h = torch.ones((1, 1), dtype=dtype)
    block = torch.tensor([[1.0, 1.0], [1.0, -1.0]], dtype=dtype)
    while h.shape[0] < n:
        h = torch.kron(block, h)
    return h


def _check_latent(z: torch.Tensor, channels: int) -> torch.Tensor:
    batch, _ = as_batch(z)
    if batch.shape[1] != channels:
        raise ShapeMismatchError(f"latent has {batch.shape[1]} channels, backend expects {channels}")
    return batch


class AnalyticAutoencoder(nn.Module):
    kind = "analytic-orthogonal"

    def __init__(self, factor: int = 2, image_channels: int = 3):
        super().__init__()
        self.factor = _check_factor(factor)
        self.image_channels = int(image_channels)
        self.latent_channels = self.image_channels * self.factor * self.factor
        n = self.factor * self.factor
        # Symmetric and orthonormal after the 1/f scaling, so it is its own inverse.
        self.register_buffer("basis", sylvester_hadamard(n) / float(self.factor), persistent=False)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        check_image(x, factor=self.factor, channels=self.image_channels)
        batch, single = as_batch(x)
        n, c = batch.shape[0], self.image_channels
        f2 = self.factor * self.factor
        patches = F.pixel_unshuffle(batch, self.factor)
        h, w = patches.shape[-2:]
        patches = patches.reshape(n, c, f2, h, w)
        coeffs = torch.einsum("kj,ncjhw->nckhw", self.basis.to(batch.dtype), patches)
        z = coeffs.permute(0, 2, 1, 3, 4).reshape(n, f2 * c, h, w)
        return z[0] if single else z

    def decode(self, z: torch.Tensor, *, clamp: bool = True) -> torch.Tensor:
        batch = _check_latent(z, self.latent_channels)
        single = z.dim() == 3
        n, c = batch.shape[0], self.image_channels
        f2 = self.factor * self.factor
        h, w = batch.shape[-2:]
        coeffs = batch.reshape(n, f2, c, h, w).permute(0, 2, 1, 3, 4)
        patches = torch.einsum("kj,nckhw->ncjhw", self.basis.to(batch.dtype), coeffs)
        x = F.pixel_shuffle(patches.reshape(n, c * f2, h, w), self.factor)
        if clamp:
            x = x.clamp(0.0, 1.0)
        return x[0] if single else x

    def info(self) -> AutoencoderInfo:
        return AutoencoderInfo(kind=self.kind, factor=self.factor, latent_channels=self.latent_channels, image_channels=self.image_channels)


class ConvAutoencoder(nn.Module):
    kind = "trained-conv"

    def __init__(self, factor: int = 2, latent_channels: int = 4, image_channels: int = 3, width: int = 32):
        super().__init__()
        self.factor = _check_factor(factor)
        if latent_channels < 1:
            raise ConfigError(f"latent_channels must be >= 1, got {latent_channels}")
        self.latent_channels = int(latent_channels)
        self.image_channels = int(image_channels)
        self.width = int(width)
        levels = int(math.log2(self.factor))

        enc: list[nn.Module] = [nn.Conv2d(self.image_channels, self.width, 3, padding=1), nn.SiLU()]
        for _ in range(levels):
            enc += [nn.Conv2d(self.width, self.width, 3, stride=2, padding=1), nn.SiLU()]
        enc.append(nn.Conv2d(self.width, self.latent_channels, 1))
        self.encoder = nn.Sequential(*enc)

        dec: list[nn.Module] = [nn.Conv2d(self.latent_channels, self.width, 3, padding=1), nn.SiLU()]
        for _ in range(levels):
            dec += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(self.width, self.width, 3, padding=1), nn.SiLU()]
        dec.append(nn.Conv2d(self.width, self.image_channels, 3, padding=1))
        self.decoder = nn.Sequential(*dec)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        check_image(x, factor=self.factor, channels=self.image_channels)
        batch, single = as_batch(x)
        z = self.encoder(batch * 2.0 - 1.0)
        return z[0] if single else z

    def decode(self, z: torch.Tensor, *, clamp: bool = True) -> torch.Tensor:
        batch = _check_latent(z, self.latent_channels)
        single = z.dim() == 3
        x = (self.decoder(batch) + 1.0) / 2.0
        if clamp:
            x = x.clamp(0.0, 1.0)
        return x[0] if single else x

    def info(self) -> AutoencoderInfo:
        return AutoencoderInfo(
            kind=self.kind,
            factor=self.factor,
            latent_channels=self.latent_channels,
            image_channels=self.image_channels,
            extra={"width": self.width},
        )


def build_autoencoder(kind: str, *, factor: int = 2, latent_channels: int = 4, image_channels: int = 3, width: int = 32) -> nn.Module:
    if kind in ("analytic", "analytic-orthogonal"):
        return AnalyticAutoencoder(factor=factor, image_channels=image_channels)
    if kind in ("trained", "trained-conv", "conv"):
        return ConvAutoencoder(factor=factor, latent_channels=latent_channels, image_channels=image_channels, width=width)
    raise ConfigError(f"unknown autoencoder kind: {kind}")


def autoencoder_from_info(info: AutoencoderInfo | dict) -> nn.Module:
    raw = info if isinstance(info, dict) else {**info.__dict__}
    extra = dict(raw.get("extra") or {})
    return build_autoencoder(
        str(raw["kind"]),
        factor=int(raw["factor"]),
        latent_channels=int(raw["latent_channels"]),
        image_channels=int(raw.get("image_channels", 3)),
        width=int(extra.get("width", 32)),
    )


def encode(x: torch.Tensor, backend: AutoencoderBackend) -> torch.Tensor:
    return backend.encode(x)


def decode(z: torch.Tensor, backend: AutoencoderBackend) -> torch.Tensor:
    return backend.decode(z, clamp=True)


@torch.no_grad()
def reconstruction_mse(backend: AutoencoderBackend, images: torch.Tensor) -> float:
    batch, _ = as_batch(images)
    recon = backend.decode(backend.encode(batch), clamp=True)
    return float(F.mse_loss(recon, batch))


def train_autoencoder(
    backend: ConvAutoencoder,
    images: torch.Tensor,
    *,
    steps: int = 2000,
    lr: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
    progress_callback: Callable[[str, float, str], None] | None = None,
) -> list[float]:
    """Fit the conv backend to reconstruct `images`; returns the per-step loss history."""
    progress = progress_callback or (lambda phase, frac, msg: None)
    if not isinstance(backend, ConvAutoencoder):
        log.info("autoencoder kind %s has no trainable recipe; skipping", getattr(backend, "kind", "?"))
        return []
    batch, _ = as_batch(images)
    if batch.shape[0] == 0:
        raise ConfigError("cannot train an autoencoder on an empty image set")
    gen = make_generator(seed, "autoencoder")
    opt = torch.optim.Adam(backend.parameters(), lr=lr)
    backend.train()
    history: list[float] = []
    report_every = max(1, steps // 20)
    for step in range(int(steps)):
        idx = torch.randint(0, batch.shape[0], (min(batch_size, batch.shape[0]),), generator=gen)
        x = batch[idx.to(batch.device)]
        recon = backend.decode(backend.encode(x), clamp=False)
        loss = F.mse_loss(recon, x)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
        if step % report_every == 0 or step == steps - 1:
            progress("autoencoder", (step + 1) / steps, f"step {step + 1}/{steps} loss {history[-1]:.5f}")
    backend.eval()
    log.info("autoencoder trained: %d steps, final loss %.6f", steps, history[-1] if history else float("nan"))
    return history
