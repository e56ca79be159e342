from .clip import (
    NEGATIVE_PROMPT,
    POSITIVE_PROMPT,
    RandomProjectionProvider,
    clip_iqa,
    clip_iqa_scores,
    clip_sim,
    load_provider,
)
from .evaluate import evaluate_directories, evaluate_generation, evaluate_sdedit
from .ms_ssim import MsSsimConfig, gaussian_window, ms_ssim, ms_ssim_batch
from .protocols import EmbeddingProvider

__all__ = [
    "EmbeddingProvider",
    "MsSsimConfig",
    "NEGATIVE_PROMPT",
    "POSITIVE_PROMPT",
    "RandomProjectionProvider",
    "clip_iqa",
    "clip_iqa_scores",
    "clip_sim",
    "evaluate_directories",
    "evaluate_generation",
    "evaluate_sdedit",
    "gaussian_window",
    "load_provider",
    "ms_ssim",
    "ms_ssim_batch",
]
