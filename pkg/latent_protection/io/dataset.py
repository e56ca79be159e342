"""
Procedural identity dataset.

Each group is one synthetic "person": a fixed palette and face layout. Images within a
group vary by pose offset, scale, lighting and background texture. Training images and
held-out images of the same identities are written side by side:

  <root>/train/group_00/img_000.png
  <root>/holdout/group_00/img_000.png
  <root>/index.json
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch
from PIL import Image, ImageDraw, ImageFilter

from latent_protection.errors import ChecksumMismatchError, ConfigError
from latent_protection.hashing import sha256_file
from latent_protection.seeding import derive_seed

from .images import load_png

log = logging.getLogger("latent_protection.io.dataset")

INDEX_NAME = "index.json"
SPLITS = ("train", "holdout")


@dataclass(frozen=True)
class ToyDatasetSpec:
    groups: int = 5
    per_group: int = 20
    holdout_per_group: int = 4
    size: int = 32
    seed: int = 0
    pose_jitter: float = 0.08
    light_jitter: float = 0.15
    texture: float = 0.04

    def __post_init__(self) -> None:
        if self.groups < 1 or self.per_group < 1 or self.holdout_per_group < 0:
            raise ConfigError(f"dataset needs >= 1 group and image per group: {self}")
        if self.size < 8:
            raise ConfigError(f"image size must be >= 8, got {self.size}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict[str, Any] | None) -> "ToyDatasetSpec":
        raw = dict(raw or {})
        return cls(**{k: raw[k] for k in cls.__dataclass_fields__ if k in raw})


def _identity(spec: ToyDatasetSpec, group: int) -> dict[str, Any]:
    rng = np.random.default_rng(derive_seed(spec.seed, f"identity:{group}"))
    return {
        "background": rng.integers(30, 226, size=3),
        "skin": rng.integers(90, 246, size=3),
        "hair": rng.integers(0, 160, size=3),
        "eyes": rng.integers(0, 120, size=3),
        "face_w": float(rng.uniform(0.45, 0.65)),
        "face_h": float(rng.uniform(0.55, 0.75)),
        "eye_gap": float(rng.uniform(0.14, 0.22)),
        "hair_h": float(rng.uniform(0.12, 0.28)),
        "mouth_w": float(rng.uniform(0.12, 0.28)),
    }


def _render(spec: ToyDatasetSpec, ident: dict[str, Any], rng: np.random.Generator) -> np.ndarray:
    # Draw at 4x and downsample for smooth edges.
    s = spec.size * 4
    img = Image.new("RGB", (s, s), tuple(int(v) for v in ident["background"]))
    draw = ImageDraw.Draw(img)
    dx, dy = rng.uniform(-spec.pose_jitter, spec.pose_jitter, size=2) * s
    scale = float(rng.uniform(0.92, 1.08))
    cx, cy = s / 2 + dx, s / 2 + dy
    fw, fh = ident["face_w"] * s * scale / 2, ident["face_h"] * s * scale / 2
    draw.ellipse((cx - fw, cy - fh, cx + fw, cy + fh), fill=tuple(int(v) for v in ident["hair"]))
    hairline = cy - fh + ident["hair_h"] * 2 * fh
    draw.ellipse((cx - 0.92 * fw, hairline, cx + 0.92 * fw, cy + fh), fill=tuple(int(v) for v in ident["skin"]))
    gap = ident["eye_gap"] * s * scale
    er = max(1.0, 0.035 * s * scale)
    ey = cy - 0.1 * fh
    for ex in (cx - gap, cx + gap):
        draw.ellipse((ex - er, ey - er, ex + er, ey + er), fill=tuple(int(v) for v in ident["eyes"]))
    mw = ident["mouth_w"] * s * scale / 2
    my = cy + 0.45 * fh
    draw.line((cx - mw, my, cx + mw, my), fill=tuple(int(v) for v in ident["eyes"]), width=max(1, int(er)))
    small = img.filter(ImageFilter.GaussianBlur(radius=1.0)).resize((spec.size, spec.size), Image.Resampling.BOX)
    arr = np.asarray(small, dtype=np.float64) / 255.0
    light = 1.0 + rng.uniform(-spec.light_jitter, spec.light_jitter)
    arr = arr * light + rng.normal(0.0, spec.texture, size=arr.shape)
    return np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def generate_dataset(spec: ToyDatasetSpec, root: Path | str) -> dict[str, Any]:
    """Write every image and an index with per-file sha256; returns the index."""
    out = Path(root)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"dataset output {out} is not writable: {exc}") from exc
    entries: list[dict[str, Any]] = []
    for g in range(spec.groups):
        ident = _identity(spec, g)
        for split, count in (("train", spec.per_group), ("holdout", spec.holdout_per_group)):
            for i in range(count):
                rng = np.random.default_rng(derive_seed(spec.seed, f"{split}:{g}:{i}"))
                rel = Path(split) / f"group_{g:02d}" / f"img_{i:03d}.png"
                path = out / rel
                path.parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray(_render(spec, ident, rng)).save(path, format="PNG")
                entries.append({"path": rel.as_posix(), "group": g, "split": split, "sha256": sha256_file(path)})
    index = {"spec": spec.to_dict(), "images": entries}
    (out / INDEX_NAME).write_text(json.dumps(index, indent=2), encoding="utf-8")
    log.info("dataset: %d groups x (%d train + %d holdout) at %s", spec.groups, spec.per_group, spec.holdout_per_group, out)
    return index


def load_dataset(
    root: Path | str,
    *,
    split: str = "train",
    verify: bool = True,
    dtype: torch.dtype = torch.float32,
) -> tuple[torch.Tensor, torch.Tensor, list[Path]]:
    """(images (N, C, H, W), group ids (N,), paths) for one split, in index order."""
    if split not in SPLITS:
        raise ConfigError(f"split must be one of {SPLITS}, got {split!r}")
    base = Path(root)
    index_path = base / INDEX_NAME
    if not index_path.is_file():
        raise ConfigError(f"{base} has no {INDEX_NAME}; generate the dataset first")
    index = json.loads(index_path.read_text(encoding="utf-8"))
    images, groups, paths = [], [], []
    for entry in index["images"]:
        if entry["split"] != split:
            continue
        path = base / entry["path"]
        if verify and sha256_file(path) != entry["sha256"]:
            raise ChecksumMismatchError(f"{path} does not match its index hash")
        images.append(load_png(path, dtype))
        groups.append(int(entry["group"]))
        paths.append(path)
    if not images:
        raise ConfigError(f"{base} has no {split} images")
    return torch.stack(images), torch.tensor(groups, dtype=torch.long), paths
