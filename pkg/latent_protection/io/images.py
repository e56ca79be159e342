"""8-bit PNG boundary. On disk images are (H, W, C) uint8; in memory (C, H, W) floats in [0, 1]."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from latent_protection.errors import ShapeMismatchError


def to_uint8(x: torch.Tensor) -> np.ndarray:
    if x.dim() != 3:
        raise ShapeMismatchError(f"expected a (C, H, W) image, got shape {tuple(x.shape)}")
    arr = x.detach().to("cpu", torch.float64).clamp(0.0, 1.0).permute(1, 2, 0).numpy()
    return np.rint(arr * 255.0).astype(np.uint8)


def from_uint8(arr: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return torch.from_numpy(arr.astype(np.float64) / 255.0).permute(2, 0, 1).contiguous().to(dtype)


def quantize(x: torch.Tensor) -> torch.Tensor:
    """Snap to the 1/255 grid, keeping dtype and device."""
    return (x.clamp(0.0, 1.0) * 255.0).round() / 255.0


def save_png(x: torch.Tensor | np.ndarray, path: Path | str) -> Path:
    arr = x if isinstance(x, np.ndarray) else to_uint8(x)
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr[:, :, 0] if arr.shape[2] == 1 else arr).save(out, format="PNG")
    return out


def load_png(path: Path | str, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return from_uint8(arr, dtype)


def list_pngs(directory: Path | str) -> list[Path]:
    return sorted(p for p in Path(directory).rglob("*.png") if p.is_file())


def load_png_dir(directory: Path | str, dtype: torch.dtype = torch.float32) -> tuple[list[Path], torch.Tensor]:
    paths = list_pngs(directory)
    if not paths:
        return [], torch.empty(0)
    return paths, torch.stack([load_png(p, dtype) for p in paths])
