"""Min-max normalisation of latent fields and per-channel heatmap rendering."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageOps

from .types import BiasField

log = logging.getLogger("latent_protection.analysis.heatmaps")


def normalize_field(E: BiasField | torch.Tensor) -> torch.Tensor:
    """(E - min) / (max - min) over the whole field; a constant field maps to 0.5."""
    data = (E.data if isinstance(E, BiasField) else E).detach().to(torch.float64)
    lo, hi = float(data.min()), float(data.max())
    if hi <= lo:
        log.warning("constant field (value %.6g) normalised to 0.5", lo)
        return torch.full_like(data, 0.5)
    return (data - lo) / (hi - lo)


def heatmap_grid(E: BiasField | torch.Tensor, *, gap: int = 1) -> np.ndarray:
    """Normalised (c, h, w) field laid out as c panels side by side, gap columns at 0.5."""
    norm = normalize_field(E)
    if norm.dim() == 2:
        norm = norm.unsqueeze(0)
    c, h, w = norm.shape
    grid = np.full((h, c * w + (c - 1) * gap), 0.5, dtype=np.float64)
    for i in range(c):
        x0 = i * (w + gap)
        grid[:, x0:x0 + w] = norm[i].numpy()
    return grid


def render_heatmap(E: BiasField | torch.Tensor, path: Path | str, *, scale: int = 8) -> Path:
    """Blue-white-red PNG of heatmap_grid, upscaled by `scale` with nearest neighbour."""
    grid = heatmap_grid(E)
    gray = Image.fromarray(np.rint(grid * 255.0).astype(np.uint8))
    colored = ImageOps.colorize(gray, black="#2166ac", white="#b2182b", mid="#f7f7f7")
    if scale > 1:
        colored = colored.resize((colored.width * scale, colored.height * scale), Image.Resampling.NEAREST)
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    colored.save(out, format="PNG")
    return out
