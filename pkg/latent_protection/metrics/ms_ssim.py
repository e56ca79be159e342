"""
Multi-scale SSIM on [0, 1] images.

Per scale, contrast-structure means are taken per channel; the coarsest scale uses the
full SSIM. Negative per-scale values are clipped at zero before the weighted geometric
mean, and the result is averaged over channels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Any

import torch
import torch.nn.functional as F

from latent_protection.diffusion.types import as_batch, check_same_shape
from latent_protection.errors import ConfigError

log = logging.getLogger("latent_protection.metrics.ms_ssim")

PUBLISHED_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def _normalized(weights: tuple[float, ...]) -> tuple[float, ...]:
    total = float(sum(weights))
    if total <= 0 or any(w < 0 for w in weights):
        raise ConfigError(f"MS-SSIM weights must be nonnegative with a positive sum, got {weights}")
    return tuple(float(w) / total for w in weights)


@dataclass(frozen=True)
class MsSsimConfig:
    scales: int = 5
    weights: tuple[float, ...] | None = None
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    def __post_init__(self) -> None:
        if int(self.scales) < 1:
            raise ConfigError(f"scales must be >= 1, got {self.scales}")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError(f"window must be a positive odd size, got {self.window}")
        if self.weights is None:
            if self.scales > len(PUBLISHED_WEIGHTS):
                raise ConfigError(f"no default weights for {self.scales} scales; pass weights explicitly")
            base = PUBLISHED_WEIGHTS[: self.scales]
        else:
            base = tuple(self.weights)
            if len(base) != self.scales:
                raise ConfigError(f"{len(base)} weights given for {self.scales} scales")
        object.__setattr__(self, "weights", _normalized(base))

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2

    def min_side(self) -> int:
        return self.window * 2 ** (self.scales - 1)

    def fitted(self, height: int, width: int) -> "MsSsimConfig":
        """Drop scales, then shrink the window, until the coarsest scale holds one full window."""
        side = min(int(height), int(width))
        scales = int(self.scales)
        while scales > 1 and side // 2 ** (scales - 1) < self.window:
            scales -= 1
        window = self.window
        while window > 1 and side // 2 ** (scales - 1) < window:
            window -= 2
        if scales == self.scales and window == self.window:
            return self
        weights = None if self.weights is None else tuple(self.weights[:scales])
        fitted = replace(self, scales=scales, window=window, weights=weights)
        log.debug("MS-SSIM fitted to %dx%d: scales %d -> %d, window %d -> %d", height, width, self.scales, scales, self.window, window)
        return fitted

    def to_dict(self) -> dict[str, Any]:
        return {
            "scales": self.scales,
            "weights": list(self.weights or ()),
            "window": self.window,
            "sigma": self.sigma,
            "k1": self.k1,
            "k2": self.k2,
            "data_range": self.data_range,
        }


def gaussian_window(size: int, sigma: float, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    return (g / g.sum()).to(dtype)


def _filter(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    c = x.shape[1]
    k = win.numel()
    horiz = win.reshape(1, 1, 1, k).expand(c, 1, 1, k)
    vert = win.reshape(1, 1, k, 1).expand(c, 1, k, 1)
    return F.conv2d(F.conv2d(x, horiz, groups=c), vert, groups=c)


def _ssim_cs(x: torch.Tensor, y: torch.Tensor, cfg: MsSsimConfig, win: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-(image, channel) mean SSIM and contrast-structure values, shape (N, C)."""
    mu_x = _filter(x, win)
    mu_y = _filter(y, win)
    sxx = _filter(x * x, win) - mu_x**2
    syy = _filter(y * y, win) - mu_y**2
    sxy = _filter(x * y, win) - mu_x * mu_y
    cs_map = (2.0 * sxy + cfg.c2) / (sxx + syy + cfg.c2)
    lum = (2.0 * mu_x * mu_y + cfg.c1) / (mu_x**2 + mu_y**2 + cfg.c1)
    return (lum * cs_map).flatten(2).mean(-1), cs_map.flatten(2).mean(-1)


def downsample(x: torch.Tensor) -> torch.Tensor:
    """2x average pooling; an odd edge gets a border cell averaged over real pixels only."""
    pad = (x.shape[2] % 2, x.shape[3] % 2)
    return F.avg_pool2d(x, kernel_size=2, padding=pad, count_include_pad=False)


def ms_ssim_batch(x: torch.Tensor, y: torch.Tensor, cfg: MsSsimConfig | None = None) -> torch.Tensor:
    """MS-SSIM per image pair, shape (N,)."""
    cfg = cfg or MsSsimConfig()
    check_same_shape(x, y, "MS-SSIM inputs")
    a, _ = as_batch(x)
    b, _ = as_batch(y)
    a = a.to(torch.float64)
    b = b.to(torch.float64)
    side = min(a.shape[-2], a.shape[-1])
    if side // 2 ** (cfg.scales - 1) < cfg.window:
        raise ConfigError(
            f"{cfg.scales} scales with an {cfg.window}-tap window need images of at least {cfg.min_side()} px; got {side}"
        )
    win = gaussian_window(cfg.window, cfg.sigma)
    weights = torch.tensor(cfg.weights, dtype=torch.float64)
    values = []
    for level in range(cfg.scales):
        ssim_val, cs = _ssim_cs(a, b, cfg, win)
        values.append(torch.relu(ssim_val if level == cfg.scales - 1 else cs))
        if level < cfg.scales - 1:
            a, b = downsample(a), downsample(b)
    stacked = torch.stack(values, dim=0)
    per_channel = torch.prod(stacked ** weights[:, None, None], dim=0)
    return per_channel.mean(dim=1)


def ms_ssim(x: torch.Tensor, y: torch.Tensor, cfg: MsSsimConfig | None = None) -> float:
    return float(ms_ssim_batch(x, y, cfg).mean())
