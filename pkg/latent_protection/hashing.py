"""Content hashes for tensors, state dicts and files (sha256 hex)."""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Mapping

import torch


def _tensor_bytes(t: torch.Tensor) -> bytes:
    arr = t.detach().to("cpu").contiguous().numpy()
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def sha256_tensor(t: torch.Tensor) -> str:
    h = hashlib.sha256()
    h.update(f"{t.dtype}:{tuple(t.shape)}".encode("utf-8"))
    h.update(_tensor_bytes(t))
    return h.hexdigest()


def state_dict_hash(state: Mapping[str, torch.Tensor] | torch.nn.Module, *, exclude: str | None = None) -> str:
    """Order-independent hash of named tensors; names containing `exclude` are skipped."""
    if isinstance(state, torch.nn.Module):
        state = state.state_dict()
    h = hashlib.sha256()
    for name in sorted(state):
        if exclude and exclude in name:
            continue
        h.update(name.encode("utf-8"))
        h.update(sha256_tensor(state[name]).encode("ascii"))
    return h.hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Path | str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()

