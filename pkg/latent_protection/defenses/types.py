from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from latent_protection.errors import ConfigError

DEFENSE_KINDS = ("gaussian", "jpeg", "resize", "sr")
PIPELINES = ("sdedit", "finetune+sample")


@dataclass(frozen=True)
class DefenseSpec:
    """One purification setting. `sigma` is in 8-bit pixel units."""

    kind: str
    sigma: float = 0.0
    quality: int = 75
    factor: float = 2.0
    interpolation: str = "bicubic"
    model: str = "default"

    def __post_init__(self) -> None:
        if self.kind not in DEFENSE_KINDS:
            raise ConfigError(f"unknown defense kind {self.kind!r}; expected one of {DEFENSE_KINDS}")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        if not 1 <= int(self.quality) <= 100:
            raise ConfigError(f"JPEG quality must be in [1, 100], got {self.quality}")
        if self.factor <= 0:
            raise ConfigError(f"resize factor must be > 0, got {self.factor}")
        if self.interpolation != "bicubic":
            raise ConfigError(f"only bicubic interpolation is supported, got {self.interpolation!r}")

    @property
    def label(self) -> str:
        if self.kind == "gaussian":
            return f"gaussian-{self.sigma:g}"
        if self.kind == "jpeg":
            return f"jpeg-{int(self.quality)}"
        if self.kind == "resize":
            return f"resize-{self.factor:g}x"
        return f"sr-{self.model}"

    @classmethod
    def parse(cls, text: str) -> "DefenseSpec":
        """`gaussian:sigma=4`, `jpeg:quality=20`, `resize:factor=0.5`, `sr:model=name`."""
        kind, _, rest = text.strip().partition(":")
        kwargs: dict[str, Any] = {}
        for item in filter(None, (p.strip() for p in rest.split(","))):
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"defense option {item!r} must be key=value")
            key = key.strip()
            if key in ("sigma", "factor"):
                kwargs[key] = float(value)
            elif key == "quality":
                kwargs[key] = int(value)
            elif key in ("interpolation", "model"):
                kwargs[key] = value.strip()
            else:
                raise ConfigError(f"unknown defense option {key!r}")
        return cls(kind=kind.strip(), **kwargs)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "sigma": self.sigma,
            "quality": int(self.quality),
            "factor": self.factor,
            "interpolation": self.interpolation,
            "model": self.model,
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "DefenseSpec":
        return cls(**{k: v for k, v in raw.items() if k in cls.__dataclass_fields__})


@dataclass
class RobustnessReport:
    """Metric columns keyed by defense label; failed columns hold {"error": message}."""

    pipeline: str
    zeta: float
    columns: dict[str, dict[str, Any]] = field(default_factory=dict)

    @property
    def failed(self) -> list[str]:
        return [k for k, v in self.columns.items() if "error" in v]

    def to_dict(self) -> dict[str, Any]:
        return {"pipeline": self.pipeline, "zeta": self.zeta, "columns": self.columns}
