"""Quality table for one protection method: SDEdit fidelity and finetune+sample quality."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Sequence

import torch

from latent_protection.errors import ConfigError
from latent_protection.io.images import list_pngs, load_png

from .clip import NEGATIVE_PROMPT, POSITIVE_PROMPT, REPORT_SCALE, RandomProjectionProvider, clip_iqa_scores, clip_sim
from .ms_ssim import MsSsimConfig, ms_ssim_batch
from .protocols import EmbeddingProvider

log = logging.getLogger("latent_protection.metrics.evaluate")


def evaluate_sdedit(
    inputs: torch.Tensor | Sequence[torch.Tensor],
    outputs: torch.Tensor | Sequence[torch.Tensor],
    *,
    provider: EmbeddingProvider | None = None,
    ms_cfg: MsSsimConfig | None = None,
) -> dict[str, float]:
    """Mean MS-SSIM and CLIP-SIM (x100) between each SDEdit input and its output. Lower means a stronger attack."""
    xs = torch.stack(list(inputs)) if not isinstance(inputs, torch.Tensor) else inputs
    ys = torch.stack(list(outputs)) if not isinstance(outputs, torch.Tensor) else outputs
    if xs.shape[0] == 0:
        raise ConfigError("no SDEdit pairs to evaluate")
    if xs.shape != ys.shape:
        raise ConfigError(f"SDEdit inputs {tuple(xs.shape)} and outputs {tuple(ys.shape)} do not pair up")
    provider = provider or RandomProjectionProvider(channels=xs.shape[1])
    cfg = (ms_cfg or MsSsimConfig()).fitted(xs.shape[-2], xs.shape[-1])
    ms = ms_ssim_batch(xs, ys, cfg)
    sims = [clip_sim(x, y, provider) for x, y in zip(xs, ys)]
    return {
        "ms_ssim": float(ms.mean()),
        "clip_sim": REPORT_SCALE * sum(sims) / len(sims),
        "pairs": int(xs.shape[0]),
    }


def evaluate_generation(
    images: torch.Tensor | Sequence[torch.Tensor],
    *,
    provider: EmbeddingProvider | None = None,
    positive: str = POSITIVE_PROMPT,
    negative: str = NEGATIVE_PROMPT,
) -> dict[str, float]:
    """CLIP-IQA of finetune+sample outputs. Higher negative-prompt similarity means a stronger attack."""
    items = list(images)
    if not items:
        raise ConfigError("no generated images to evaluate")
    provider = provider or RandomProjectionProvider(channels=items[0].shape[0])
    scores = clip_iqa_scores(items, provider, positive=positive, negative=negative)
    return {"clip_iqa": scores["negative"], "clip_iqa_positive": scores["positive"], "images": len(items)}


def _paired(clean_dir: Path, out_dir: Path) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
    xs, ys = [], []
    missing = []
    for path in list_pngs(clean_dir):
        rel = path.relative_to(clean_dir)
        other = out_dir / rel
        if not other.is_file():
            missing.append(str(rel))
            continue
        xs.append(load_png(path, torch.float64))
        ys.append(load_png(other, torch.float64))
    if missing:
        raise ConfigError(f"{len(missing)} input image(s) have no SDEdit output, e.g. {missing[0]}")
    return xs, ys


def evaluate_directories(
    clean_dir: Path | str,
    *,
    sdedit_dir: Path | str | None = None,
    sample_dir: Path | str | None = None,
    method: str = "protected",
    provider: EmbeddingProvider | None = None,
    ms_cfg: MsSsimConfig | None = None,
) -> dict[str, Any]:
    """
    One row of the quality table:
    {"method": ..., "sdedit": {"ms_ssim", "clip_sim"}, "finetune_sample": {"clip_iqa"}}.
    SDEdit outputs are matched to inputs by relative path.
    """
    if sdedit_dir is None and sample_dir is None:
        raise ConfigError("evaluate needs an SDEdit output directory, a sample directory, or both")
    row: dict[str, Any] = {"method": method}
    if sdedit_dir is not None:
        xs, ys = _paired(Path(clean_dir), Path(sdedit_dir))
        row["sdedit"] = evaluate_sdedit(xs, ys, provider=provider, ms_cfg=ms_cfg)
    if sample_dir is not None:
        paths = list_pngs(sample_dir)
        row["finetune_sample"] = evaluate_generation([load_png(p, torch.float64) for p in paths], provider=provider)
    log.info("evaluate %s: %s", method, row)
    return row
