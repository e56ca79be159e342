"""Input purification applied to adversarial images before they reach a victim pipeline."""

from __future__ import annotations

import io
import logging
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from latent_protection.diffusion.types import as_batch
from latent_protection.errors import DefenseUnavailable
from latent_protection.io.images import from_uint8, to_uint8
from latent_protection.seeding import make_generator

from .types import DefenseSpec

log = logging.getLogger("latent_protection.defenses.purify")

SuperResolver = Callable[[torch.Tensor], torch.Tensor]

DEFAULT_DEFENSE_GRID: tuple[DefenseSpec, ...] = (
    DefenseSpec(kind="gaussian", sigma=4.0),
    DefenseSpec(kind="gaussian", sigma=8.0),
    DefenseSpec(kind="jpeg", quality=20),
    DefenseSpec(kind="jpeg", quality=70),
    DefenseSpec(kind="resize", factor=2.0),
    DefenseSpec(kind="resize", factor=0.5),
    DefenseSpec(kind="sr"),
)


class SuperResolutionRegistry:
    """Named super-resolution callables: (N, C, H, W) in [0, 1] -> same shape."""

    def __init__(self) -> None:
        self._models: dict[str, SuperResolver] = {}

    def register(self, name: str, fn: SuperResolver) -> None:
        self._models[str(name)] = fn
        log.info("registered super-resolution model %r", name)

    def get(self, name: str) -> SuperResolver:
        try:
            return self._models[name]
        except KeyError:
            raise DefenseUnavailable(
                f"no super-resolution model registered as {name!r} (have: {sorted(self._models) or 'none'})"
            ) from None

    def names(self) -> list[str]:
        return sorted(self._models)


def _gaussian(x: torch.Tensor, sigma: float, seed: int) -> torch.Tensor:
    if sigma == 0:
        return x.clone()
    gen = make_generator(seed, "purify:gaussian")
    noise = torch.randn(x.shape, generator=gen, dtype=torch.float64).to(device=x.device, dtype=x.dtype)
    return (x + noise * (sigma / 255.0)).clamp(0.0, 1.0)


def _jpeg_one(img: torch.Tensor, quality: int) -> torch.Tensor:
    arr = to_uint8(img)
    pil = Image.fromarray(arr[:, :, 0] if arr.shape[2] == 1 else arr)
    buf = io.BytesIO()
    pil.save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    with Image.open(buf) as decoded:
        out = np.asarray(decoded.convert("L" if arr.shape[2] == 1 else "RGB"), dtype=np.uint8)
    return from_uint8(out, img.dtype).to(img.device)


def _resize(x: torch.Tensor, factor: float) -> torch.Tensor:
    h, w = x.shape[-2:]
    size = (max(1, int(round(h * factor))), max(1, int(round(w * factor))))
    scaled = F.interpolate(x, size=size, mode="bicubic", align_corners=False)
    return F.interpolate(scaled, size=(h, w), mode="bicubic", align_corners=False).clamp(0.0, 1.0)


@torch.no_grad()
def purify(
    x: torch.Tensor,
    spec: DefenseSpec,
    seed: int = 0,
    *,
    registry: SuperResolutionRegistry | None = None,
) -> torch.Tensor:
    """Apply one defense to a (C, H, W) image or (N, C, H, W) batch; shape and [0, 1] range are kept."""
    batch, single = as_batch(x)
    if spec.kind == "gaussian":
        out = _gaussian(batch, spec.sigma, seed)
    elif spec.kind == "jpeg":
        out = torch.stack([_jpeg_one(img, spec.quality) for img in batch])
    elif spec.kind == "resize":
        out = _resize(batch, spec.factor)
    else:
        if registry is None:
            raise DefenseUnavailable("super-resolution defense needs a registry with a model")
        out = registry.get(spec.model)(batch)
        if out.shape != batch.shape:
            raise DefenseUnavailable(f"super-resolution model returned {tuple(out.shape)}, expected {tuple(batch.shape)}")
        out = out.clamp(0.0, 1.0)
    return out[0] if single else out
