from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import torch

from latent_protection.errors import ShapeMismatchError, TimestepOutOfRange

# Images are (C, H, W) or (N, C, H, W) floats in [0, 1]; latents share the layout at H/f x W/f.
ImageTensor = torch.Tensor
LatentTensor = torch.Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor
    beta0: float = 0.0
    betaT: float = 0.0
    kind: str = "linear"

    def check_timestep(self, t: int | torch.Tensor) -> None:
        values = t if isinstance(t, torch.Tensor) else torch.tensor([int(t)])
        if values.numel() == 0:
            return
        lo = int(values.min())
        hi = int(values.max())
        if lo < 0 or hi > self.T - 1:
            raise TimestepOutOfRange(f"timestep range [{lo}, {hi}] outside [0, {self.T - 1}]")

    def gather(self, table: torch.Tensor, t: int | torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        """Index a schedule table at t and reshape to broadcast against a batched latent."""
        self.check_timestep(t)
        if isinstance(t, torch.Tensor):
            vals = table[t.long().cpu()].to(device=like.device, dtype=like.dtype)
            return vals.reshape(-1, *([1] * (like.dim() - 1)))
        return table[int(t)].to(device=like.device, dtype=like.dtype)

    def metadata(self) -> dict[str, Any]:
        return {"kind": self.kind, "T": self.T, "beta0": self.beta0, "betaT": self.betaT}


@dataclass
class AutoencoderInfo:
    kind: str
    factor: int
    latent_channels: int
    image_channels: int = 3
    extra: dict[str, Any] = field(default_factory=dict)


def as_batch(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    """Return a 4D view and whether the input was a single item."""
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise ShapeMismatchError(f"expected (C,H,W) or (N,C,H,W), got shape {tuple(x.shape)}")


def check_image(x: torch.Tensor, *, factor: int | None = None, channels: int | None = None) -> None:
    batch, _ = as_batch(x)
    if channels is not None and batch.shape[1] != channels:
        raise ShapeMismatchError(f"image has {batch.shape[1]} channels, expected {channels}")
    if factor is not None and (batch.shape[2] % factor or batch.shape[3] % factor):
        raise ShapeMismatchError(
            f"image size {batch.shape[2]}x{batch.shape[3]} not divisible by downsampling factor {factor}"
        )


def check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str = "tensors") -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeMismatchError(f"{what} differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
