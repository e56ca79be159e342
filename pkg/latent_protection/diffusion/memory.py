"""Peak-memory instrumentation: bytes held for backward by the autograd graph."""

from __future__ import annotations

import logging
from typing import Any

import torch

log = logging.getLogger("latent_protection.diffusion.memory")


class GraphMemoryMeter:
    """
    Context manager summing the bytes of every tensor autograd saves for backward.

    Tensors saved inside a checkpointed region are replaced by the checkpoint's own
    placeholders and never reach this hook, which is what recompute mode buys.
    On CUDA the allocator's peak is recorded too.
    """

    def __init__(self, device: str | torch.device | None = None):
        self.device = torch.device(device) if device is not None else torch.device("cpu")
        self.saved_bytes = 0
        self.saved_tensors = 0
        self.cuda_peak_bytes: int | None = None
        self._hooks: Any = None

    def _pack(self, tensor: torch.Tensor) -> torch.Tensor:
        self.saved_bytes += tensor.numel() * tensor.element_size()
        self.saved_tensors += 1
        return tensor

    @staticmethod
    def _unpack(tensor: torch.Tensor) -> torch.Tensor:
        return tensor

    def __enter__(self) -> "GraphMemoryMeter":
        self.saved_bytes = 0
        self.saved_tensors = 0
        if self.device.type == "cuda" and torch.cuda.is_available():
            torch.cuda.reset_peak_memory_stats(self.device)
        self._hooks = torch.autograd.graph.saved_tensors_hooks(self._pack, self._unpack)
        self._hooks.__enter__()
        return self

    def __exit__(self, *exc: Any) -> None:
        self._hooks.__exit__(*exc)
        self._hooks = None
        if self.device.type == "cuda" and torch.cuda.is_available():
            self.cuda_peak_bytes = int(torch.cuda.max_memory_allocated(self.device))
        log.debug("graph memory: %d tensors, %d bytes saved", self.saved_tensors, self.saved_bytes)

    def as_dict(self) -> dict[str, Any]:
        return {"saved_bytes": self.saved_bytes, "saved_tensors": self.saved_tensors, "cuda_peak_bytes": self.cuda_peak_bytes}
