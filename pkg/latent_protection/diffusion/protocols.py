from __future__ import annotations

from typing import Protocol, runtime_checkable

import torch


@runtime_checkable
class EpsilonModel(Protocol):
    """Noise-prediction network: (z_t, t, condition id) -> predicted noise with z_t's shape."""

    condition_vocab: int

    def __call__(self, z_t: torch.Tensor, t: int | torch.Tensor, cond: int | torch.Tensor = 0) -> torch.Tensor: ...

    def parameters(self, recurse: bool = True): ...
