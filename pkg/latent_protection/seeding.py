"""Named seed derivation. Every random stream in the toolkit starts here."""

from __future__ import annotations

import hashlib

import torch


def derive_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode("utf-8")).hexdigest()
    return int(digest[:15], 16)


def make_generator(seed: int, name: str | None = None) -> torch.Generator:
    """CPU generator; draws are moved to the working device so results do not depend on it."""
    gen = torch.Generator(device="cpu")
    gen.manual_seed(derive_seed(seed, name) if name else int(seed))
    return gen
