from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import torch

from latent_protection.errors import ConfigError
from latent_protection.hashing import sha256_tensor

FIELD_KINDS = ("eps_adv", "reverse_bias", "sampling_bias", "sampling_error")


@dataclass
class BiasField:
    data: torch.Tensor
    timestep: int | None
    mc_samples: int
    kind: str
    sources: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in FIELD_KINDS:
            raise ConfigError(f"field kind must be one of {FIELD_KINDS}, got {self.kind!r}")
        if int(self.mc_samples) < 1:
            raise ConfigError(f"mc_samples must be >= 1, got {self.mc_samples}")
        if not bool(torch.isfinite(self.data).all()):
            raise ConfigError(f"{self.kind} field contains non-finite values")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    def norm(self) -> float:
        return float(self.data.double().norm())

    def metadata(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "timestep": self.timestep,
            "mc_samples": int(self.mc_samples),
            "sources": dict(self.sources),
            "shape": list(self.data.shape),
            "hash": sha256_tensor(self.data),
        }


@dataclass
class CosineReport:
    matrix: list[list[float]]
    mean: float
    undefined: int = 0
    labels_a: list[str] = field(default_factory=list)
    labels_b: list[str] = field(default_factory=list)

    @property
    def defined(self) -> int:
        return sum(1 for row in self.matrix for v in row if not math.isnan(v))

    def to_dict(self) -> dict[str, Any]:
        def _clean(v: float) -> float | None:
            return None if math.isnan(v) else v

        return {
            "mean": _clean(self.mean),
            "undefined": self.undefined,
            "defined": self.defined,
            "matrix": [[_clean(v) for v in row] for row in self.matrix],
            "labels_a": list(self.labels_a),
            "labels_b": list(self.labels_b),
        }
