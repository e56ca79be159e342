"""
Embedding-backed similarity metrics.

Real CLIP weights are supplied through `load_provider("package.module:factory")`;
`RandomProjectionProvider` is the deterministic stand-in the toolkit runs with by default.
"""

from __future__ import annotations

import importlib
import logging
from typing import Any, Sequence

import torch
import torch.nn.functional as F

from latent_protection.errors import ConfigError, MetricUnavailable
from latent_protection.hashing import sha256_bytes

from .protocols import EmbeddingProvider

log = logging.getLogger("latent_protection.metrics.clip")

POSITIVE_PROMPT = "A good photo of a person"
NEGATIVE_PROMPT = "A bad photo of a person"
# Reported values are cosines times this factor.
REPORT_SCALE = 100.0


def _unit(v: torch.Tensor) -> torch.Tensor:
    norm = v.norm()
    if float(norm) == 0.0:
        raise MetricUnavailable("embedding has zero norm")
    return v / norm


class RandomProjectionProvider:
    """
    Fixed Gaussian projection of the `pool` x `pool` average-pooled image (plus a constant
    feature) onto `dim` dimensions. Text maps to a unit vector seeded by its sha256.
    """

    def __init__(self, dim: int = 64, seed: int = 0, pool: int = 8, channels: int = 3):
        if dim < 1 or pool < 1 or channels < 1:
            raise ConfigError(f"invalid projection provider: dim={dim} pool={pool} channels={channels}")
        self.dim = int(dim)
        self.seed = int(seed)
        self.pool = int(pool)
        self.channels = int(channels)
        gen = torch.Generator().manual_seed(self.seed)
        features = self.channels * self.pool * self.pool + 1
        self.projection = torch.randn((self.dim, features), generator=gen, dtype=torch.float64)

    def embed_image(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 3 or x.shape[0] != self.channels:
            raise MetricUnavailable(f"expected a ({self.channels}, H, W) image, got {tuple(x.shape)}")
        pooled = F.adaptive_avg_pool2d(x.detach().to("cpu", torch.float64).unsqueeze(0), self.pool).reshape(-1)
        feats = torch.cat([pooled, torch.ones(1, dtype=torch.float64)])
        return _unit(self.projection @ feats)

    def embed_text(self, text: str) -> torch.Tensor:
        digest = sha256_bytes(f"{self.seed}:{text}".encode("utf-8"))
        gen = torch.Generator().manual_seed(int(digest[:15], 16))
        return _unit(torch.randn(self.dim, generator=gen, dtype=torch.float64))


def load_provider(target: str | None, **kwargs: Any) -> EmbeddingProvider:
    """`None` or "random-projection" gives the stub; otherwise import "module:factory" and call it."""
    if target in (None, "", "random-projection"):
        return RandomProjectionProvider(**kwargs)
    module_name, sep, attr = str(target).partition(":")
    if not sep or not module_name or not attr:
        raise ConfigError(f"provider must look like 'package.module:factory', got {target!r}")
    try:
        factory = getattr(importlib.import_module(module_name), attr)
        provider = factory(**kwargs)
    except (ImportError, AttributeError) as exc:
        raise MetricUnavailable(f"embedding provider {target!r} could not be loaded: {exc}") from exc
    if not isinstance(provider, EmbeddingProvider):
        raise MetricUnavailable(f"{target!r} does not provide embed_image/embed_text/dim")
    log.info("loaded embedding provider %s (dim=%d)", target, provider.dim)
    return provider


def _embed(provider: EmbeddingProvider, fn: str, arg: Any) -> torch.Tensor:
    try:
        v = getattr(provider, fn)(arg)
    except MetricUnavailable:
        raise
    except Exception as exc:
        raise MetricUnavailable(f"provider {type(provider).__name__}.{fn} failed: {exc}") from exc
    return torch.as_tensor(v, dtype=torch.float64).reshape(-1)


def _cos(a: torch.Tensor, b: torch.Tensor) -> float:
    if a.shape != b.shape:
        raise MetricUnavailable(f"embedding sizes differ: {a.numel()} vs {b.numel()}")
    na, nb = float(a.norm()), float(b.norm())
    if na == 0.0 or nb == 0.0:
        raise MetricUnavailable("embedding has zero norm")
    return max(-1.0, min(1.0, float(torch.dot(a, b)) / (na * nb)))


def clip_sim(x: torch.Tensor, y: torch.Tensor, provider: EmbeddingProvider) -> float:
    """Raw cosine between image embeddings, in [-1, 1]."""
    return _cos(_embed(provider, "embed_image", x), _embed(provider, "embed_image", y))


def clip_iqa_scores(
    images: Sequence[torch.Tensor],
    provider: EmbeddingProvider,
    *,
    positive: str = POSITIVE_PROMPT,
    negative: str = NEGATIVE_PROMPT,
) -> dict[str, float]:
    if len(images) == 0:
        raise ConfigError("CLIP-IQA needs at least one image")
    pos = _embed(provider, "embed_text", positive)
    neg = _embed(provider, "embed_text", negative)
    pos_total = neg_total = 0.0
    for img in images:
        e = _embed(provider, "embed_image", img)
        pos_total += _cos(e, pos)
        neg_total += _cos(e, neg)
    n = len(images)
    return {"positive": REPORT_SCALE * pos_total / n, "negative": REPORT_SCALE * neg_total / n}


def clip_iqa(
    images: Sequence[torch.Tensor],
    positive: str = POSITIVE_PROMPT,
    negative: str = NEGATIVE_PROMPT,
    provider: EmbeddingProvider | None = None,
) -> float:
    """Mean negative-prompt similarity over `images`, times 100. Higher means worse output."""
    return clip_iqa_scores(images, provider or RandomProjectionProvider(), positive=positive, negative=negative)["negative"]
