from __future__ import annotations

from typing import Protocol, runtime_checkable

import torch


@runtime_checkable
class EmbeddingProvider(Protocol):
    """Joint image/text embedder. Both methods return unit-norm float64 vectors of length `dim`."""

    dim: int

    def embed_image(self, x: torch.Tensor) -> torch.Tensor: ...

    def embed_text(self, text: str) -> torch.Tensor: ...
