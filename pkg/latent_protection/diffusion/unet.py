"""
Toy UNet noise predictor: two down stages, a middle block and two up stages, with a
sinusoidal timestep embedding plus a learned condition-id embedding.

Recompute mode wraps the down and middle blocks in non-reentrant activation
checkpointing; outputs and gradients are unchanged.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Any

import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.checkpoint import checkpoint

from latent_protection.errors import ConfigError, ShapeMismatchError

log = logging.getLogger("latent_protection.diffusion.unet")

MEMORY_MODES = ("standard", "recompute")


@dataclass
class UNetConfig:
    latent_channels: int = 4
    base_channels: int = 32
    condition_vocab: int = 5

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(channels, 8), channels)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, device=t.device, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class DownBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch, emb_dim)
        self.down = nn.Conv2d(out_ch, out_ch, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        skip = self.res(x, emb)
        return self.down(skip), skip


class UpBlock(nn.Module):
    def __init__(self, in_ch: int, skip_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        self.up = nn.Conv2d(in_ch, in_ch, 3, padding=1)
        self.res = ResBlock(in_ch + skip_ch, out_ch, emb_dim)

    def forward(self, x: torch.Tensor, skip: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.up(F.interpolate(x, size=skip.shape[-2:], mode="nearest"))
        return self.res(torch.cat([h, skip], dim=1), emb)


class ToyUNet(nn.Module):
    def __init__(self, config: UNetConfig | None = None, **overrides: Any):
        super().__init__()
        cfg = config or UNetConfig(**overrides)
        if cfg.latent_channels < 1 or cfg.base_channels < 2 or cfg.condition_vocab < 1:
            raise ConfigError(f"invalid UNet config: {cfg}")
        self.config = cfg
        self.condition_vocab = cfg.condition_vocab
        self.latent_channels = cfg.latent_channels
        self.gradient_checkpointing = False
        ch = cfg.base_channels
        emb_dim = 4 * ch
        self.time_dim = ch
        self.time_mlp = nn.Sequential(nn.Linear(ch, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.cond_embed = nn.Embedding(cfg.condition_vocab, emb_dim)
        self.conv_in = nn.Conv2d(cfg.latent_channels, ch, 3, padding=1)
        self.down1 = DownBlock(ch, ch, emb_dim)
        self.down2 = DownBlock(ch, 2 * ch, emb_dim)
        self.mid = ResBlock(2 * ch, 2 * ch, emb_dim)
        self.up2 = UpBlock(2 * ch, 2 * ch, ch, emb_dim)
        self.up1 = UpBlock(ch, ch, ch, emb_dim)
        self.norm_out = _norm(ch)
        self.conv_out = nn.Conv2d(ch, cfg.latent_channels, 3, padding=1)

    def _embed(self, t: int | torch.Tensor, cond: int | torch.Tensor, n: int, like: torch.Tensor) -> torch.Tensor:
        tt = torch.as_tensor(t, device=like.device).reshape(-1)
        cc = torch.as_tensor(cond, device=like.device, dtype=torch.long).reshape(-1)
        if tt.numel() == 1:
            tt = tt.expand(n)
        if cc.numel() == 1:
            cc = cc.expand(n)
        if tt.numel() != n or cc.numel() != n:
            raise ShapeMismatchError(f"batch of {n} latents got {tt.numel()} timesteps and {cc.numel()} condition ids")
        if int(cc.min()) < 0 or int(cc.max()) >= self.condition_vocab:
            raise ConfigError(f"condition id outside [0, {self.condition_vocab - 1}]")
        temb = self.time_mlp(timestep_embedding(tt, self.time_dim).to(like.dtype))
        return temb + self.cond_embed(cc)

    def _run(self, block: nn.Module, *args: torch.Tensor):
        if self.gradient_checkpointing and torch.is_grad_enabled():
            return checkpoint(block, *args, use_reentrant=False)
        return block(*args)

    def forward(self, z_t: torch.Tensor, t: int | torch.Tensor, cond: int | torch.Tensor = 0) -> torch.Tensor:
        single = z_t.dim() == 3
        x = z_t.unsqueeze(0) if single else z_t
        if x.dim() != 4 or x.shape[1] != self.latent_channels:
            raise ShapeMismatchError(f"expected latent with {self.latent_channels} channels, got shape {tuple(z_t.shape)}")
        emb = self._embed(t, cond, x.shape[0], x)
        h = self.conv_in(x)
        h, skip1 = self._run(self.down1, h, emb)
        h, skip2 = self._run(self.down2, h, emb)
        h = self._run(self.mid, h, emb)
        h = self.up2(h, skip2, emb)
        h = self.up1(h, skip1, emb)
        out = self.conv_out(F.silu(self.norm_out(h)))
        return out[0] if single else out


def set_memory_mode(model: nn.Module, mode: str) -> nn.Module:
    if mode not in MEMORY_MODES:
        raise ConfigError(f"memory mode must be one of {MEMORY_MODES}, got {mode!r}")
    flagged = 0
    for module in model.modules():
        if hasattr(module, "gradient_checkpointing"):
            module.gradient_checkpointing = mode == "recompute"
            flagged += 1
    if flagged == 0:
        log.warning("model %s has no checkpointable blocks; memory mode %s has no effect", type(model).__name__, mode)
    return model
