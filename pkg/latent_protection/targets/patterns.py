"""
Procedural high-contrast target images and their latent encodings.

Pattern density is counted as repeats per axis: a pattern with repetition r has r full
periods (2r half-period cells) across the image width and height. Pixel values are
0.5 - contrast/2 or 0.5 + contrast/2.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable

import torch
from torch import nn

from latent_protection.diffusion.autoencoder import AutoencoderBackend
from latent_protection.diffusion.types import check_image
from latent_protection.errors import ConfigError
from latent_protection.hashing import sha256_tensor, state_dict_hash

log = logging.getLogger("latent_protection.targets.patterns")

PATTERN_KINDS = ("stripes", "checker", "glyph-tile")


@dataclass(frozen=True)
class PatternSpec:
    kind: str = "glyph-tile"
    repetition: int = 8
    contrast: float = 1.0
    phase: float = 0.0
    size: tuple[int, int, int] = (32, 32, 3)

    def __post_init__(self) -> None:
        if self.kind not in PATTERN_KINDS:
            raise ConfigError(f"pattern kind must be one of {PATTERN_KINDS}, got {self.kind!r}")
        if int(self.repetition) < 1:
            raise ConfigError(f"repetition must be >= 1, got {self.repetition}")
        if not (0.0 <= float(self.contrast) <= 1.0):
            raise ConfigError(f"contrast must be in [0, 1], got {self.contrast}")
        if len(self.size) != 3 or min(self.size) < 1:
            raise ConfigError(f"size must be (H, W, C) with positive entries, got {self.size}")
        height, width, _ = self.size
        if 2 * int(self.repetition) > min(height, width):
            raise ConfigError(
                f"repetition {self.repetition} exceeds the Nyquist limit {min(height, width) // 2} for a {height}x{width} image"
            )

    @classmethod
    def parse(cls, text: str, *, size: tuple[int, int, int] | None = None) -> "PatternSpec":
        """Parse "kind[:key=value,...]", e.g. "glyph-tile:repetition=8,contrast=1.0" or "stripes:size=32x32x3"."""
        kind, _, rest = text.strip().partition(":")
        kwargs: dict[str, Any] = {"kind": kind or "glyph-tile"}
        if size is not None:
            kwargs["size"] = tuple(int(v) for v in size)
        for item in filter(None, (p.strip() for p in rest.split(","))):
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"malformed pattern option {item!r}")
            key = key.strip()
            if key in ("repetition", "density"):
                kwargs["repetition"] = int(value)
            elif key == "contrast":
                kwargs["contrast"] = float(value)
            elif key == "phase":
                kwargs["phase"] = float(value)
            elif key == "size":
                kwargs["size"] = tuple(int(v) for v in value.lower().split("x"))
            else:
                raise ConfigError(f"unknown pattern option {key!r}")
        return cls(**kwargs)

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["size"] = list(self.size)
        return out

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "PatternSpec":
        raw = dict(raw)
        if "size" in raw:
            raw["size"] = tuple(int(v) for v in raw["size"])
        return cls(**{k: raw[k] for k in cls.__dataclass_fields__ if k in raw})


def _cells(n: int, repetition: int) -> torch.Tensor:
    # Half-period cell index of each pixel along one axis.
    return torch.div(torch.arange(n) * (2 * repetition), n, rounding_mode="floor")


def _glyph(index: int, th: int, tw: int) -> torch.Tensor:
    """One of a few stroke glyphs on a th x tw tile (1 = ink)."""
    yy = (torch.arange(th, dtype=torch.float64)[:, None] + 0.5) / th
    xx = (torch.arange(tw, dtype=torch.float64)[None, :] + 0.5) / tw
    shapes = [
        (yy < 0.5) ^ (xx < 0.5),
        xx + yy < 1.0,
        (yy - 0.5).abs() + (xx - 0.5).abs() < 0.5,
        xx < 0.5,
        ((yy - 0.5) ** 2 + (xx - 0.5) ** 2) < 0.16,
        yy < xx,
    ]
    return shapes[index % len(shapes)].expand(th, tw).to(torch.int64)


def _glyph_parity(height: int, width: int, repetition: int) -> torch.Tensor:
    rows = torch.div(torch.arange(height) * repetition, height, rounding_mode="floor")
    cols = torch.div(torch.arange(width) * repetition, width, rounding_mode="floor")
    parity = torch.zeros((height, width), dtype=torch.int64)
    for i in range(repetition):
        rmask = rows == i
        th = int(rmask.sum())
        for j in range(repetition):
            cmask = cols == j
            tw = int(cmask.sum())
            if th == 0 or tw == 0:
                continue
            glyph = _glyph(3 * i + 5 * j, th, tw) ^ ((i + j) % 2)
            parity[rmask.nonzero()[:, 0][:, None], cmask.nonzero()[:, 0][None, :]] = glyph
    return parity


def generate_pattern(spec: PatternSpec, *, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Render spec to a (C, H, W) image in [0, 1]."""
    height, width, channels = spec.size
    r = int(spec.repetition)
    if spec.kind == "stripes":
        parity = (_cells(width, r) % 2)[None, :].expand(height, width)
    elif spec.kind == "checker":
        parity = (_cells(height, r)[:, None] + _cells(width, r)[None, :]) % 2
    else:
        parity = _glyph_parity(height, width, r)
    shift = int(round(float(spec.phase) * width / r))
    if shift:
        parity = torch.roll(parity, shifts=shift, dims=1)
    signs = parity.to(torch.float64) * 2.0 - 1.0
    img = 0.5 + signs * (float(spec.contrast) / 2.0)
    return img.clamp(0.0, 1.0).unsqueeze(0).expand(channels, height, width).to(dtype).contiguous()


def sign_changes(row: torch.Tensor, *, cyclic: bool = True) -> int:
    """Sign changes of (row - 0.5); cyclic counting includes the wrap from last to first."""
    s = torch.sign(row.reshape(-1).to(torch.float64) - 0.5)
    nxt = torch.roll(s, -1) if cyclic else s[1:]
    cur = s if cyclic else s[:-1]
    return int(((cur * nxt) < 0).sum())


def latent_sign_alternations(z: torch.Tensor) -> int:
    """Horizontal plus vertical sign flips of a (c, h, w) latent about each channel's mean."""
    centred = z - z.mean(dim=(-2, -1), keepdim=True)
    s = torch.sign(centred)
    return int(((s[..., 1:] * s[..., :-1]) < 0).sum() + ((s[..., 1:, :] * s[..., :-1, :]) < 0).sum())


def backend_fingerprint(backend: AutoencoderBackend) -> str:
    info = backend.info()
    state = state_dict_hash(backend) if isinstance(backend, nn.Module) and len(backend.state_dict()) else "analytic"
    return f"{info.kind}:{info.factor}:{info.latent_channels}:{state}"


@dataclass
class EncodedTarget:
    latent: torch.Tensor
    image_hash: str
    latent_hash: str
    spec: dict[str, Any] | None = None

    def describe(self) -> dict[str, Any]:
        return {"image_hash": self.image_hash, "latent_hash": self.latent_hash, "spec": self.spec, "shape": list(self.latent.shape)}


@dataclass
class TargetCache:
    entries: dict[tuple[str, str], EncodedTarget] = field(default_factory=dict)
    hits: int = 0

    def get(self, image_hash: str, fingerprint: str) -> EncodedTarget | None:
        found = self.entries.get((image_hash, fingerprint))
        if found is not None:
            self.hits += 1
        return found

    def put(self, fingerprint: str, target: EncodedTarget) -> None:
        self.entries[(target.image_hash, fingerprint)] = target


@torch.no_grad()
def encode_target(
    x_t: torch.Tensor,
    backend: AutoencoderBackend,
    *,
    cache: TargetCache | None = None,
    spec: PatternSpec | None = None,
) -> EncodedTarget:
    check_image(x_t, factor=backend.factor, channels=backend.image_channels)
    image_hash = sha256_tensor(x_t)
    fingerprint = backend_fingerprint(backend)
    if cache is not None:
        found = cache.get(image_hash, fingerprint)
        if found is not None:
            return found
    latent = backend.encode(x_t).detach()
    target = EncodedTarget(
        latent=latent,
        image_hash=image_hash,
        latent_hash=sha256_tensor(latent),
        spec=spec.to_dict() if spec is not None else None,
    )
    if cache is not None:
        cache.put(fingerprint, target)
    log.debug("encoded target %s -> %s", image_hash[:12], target.latent_hash[:12])
    return target


def ablation_specs(
    densities: Iterable[int] = (2, 4, 8, 16),
    contrasts: Iterable[float] = (0.25, 0.5, 1.0),
    *,
    kind: str = "glyph-tile",
    size: tuple[int, int, int] = (32, 32, 3),
) -> list[PatternSpec]:
    """Density x contrast sweep; densities past the Nyquist limit for `size` are skipped."""
    out: list[PatternSpec] = []
    for r, c in itertools.product(densities, contrasts):
        if 2 * int(r) > min(size[0], size[1]):
            log.info("skipping repetition %d: above Nyquist for %s", r, size)
            continue
        out.append(PatternSpec(kind=kind, repetition=int(r), contrast=float(c), size=size))
    return out
