from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any

import torch

from latent_protection.errors import ConfigError
from latent_protection.hashing import sha256_tensor

log = logging.getLogger("latent_protection.attack.types")

OBJECTIVE_KINDS = ("advdm", "encoder-target", "ace", "ace-plus", "diffusion-target")
OBJECTIVE_ALIASES = {"encoder": "encoder-target", "ace+": "ace-plus", "aceplus": "ace-plus", "diffusion": "diffusion-target"}
DIRECTIONS = ("ascend", "descend")


def parse_budget(value: str | float | int) -> float:
    """Accept 0.0157, "0.0157" or "4/255"."""
    if isinstance(value, (int, float)):
        return float(value)
    text = str(value).strip()
    try:
        if "/" in text:
            return float(Fraction(text.replace(" ", "")))
        return float(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"cannot parse budget {value!r}") from exc


@dataclass(frozen=True)
class AttackBudget:
    zeta: float = 4 / 255
    step: float = 5e-3
    iters_per_epoch: int = 10
    epochs: int = 5
    finetune_steps: int = 10

    def __post_init__(self) -> None:
        if not (0.0 < self.step <= self.zeta <= 1.0):
            raise ConfigError(f"need 0 < step <= zeta <= 1, got step={self.step}, zeta={self.zeta}")
        if self.iters_per_epoch < 1 or self.epochs < 1:
            raise ConfigError(f"need K >= 1 and N >= 1, got K={self.iters_per_epoch}, N={self.epochs}")
        if self.finetune_steps < 0:
            raise ConfigError(f"finetune steps M must be >= 0, got {self.finetune_steps}")

    @property
    def total_pgd_steps(self) -> int:
        return self.epochs * self.iters_per_epoch

    @property
    def total_finetune_steps(self) -> int:
        return self.epochs * self.finetune_steps

    def to_dict(self) -> dict[str, Any]:
        return {
            "zeta": self.zeta,
            "step": self.step,
            "iters_per_epoch": self.iters_per_epoch,
            "epochs": self.epochs,
            "finetune_steps": self.finetune_steps,
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "AttackBudget":
        return cls(
            zeta=parse_budget(raw.get("zeta", 4 / 255)),
            step=parse_budget(raw.get("step", 5e-3)),
            iters_per_epoch=int(raw.get("iters_per_epoch", raw.get("pgd_steps", 10))),
            epochs=int(raw.get("epochs", 5)),
            finetune_steps=int(raw.get("finetune_steps", 10)),
        )


@dataclass
class AttackObjective:
    kind: str
    target: torch.Tensor | None = None
    fusion_weight: float = 100.0
    direction: str | None = None
    mc_samples: int = 4
    condition_id: int | None = None
    diffusion_start: int = 300
    diffusion_steps: int = 4

    def __post_init__(self) -> None:
        self.kind = OBJECTIVE_ALIASES.get(self.kind, self.kind)
        if self.kind not in OBJECTIVE_KINDS:
            raise ConfigError(f"objective kind must be one of {OBJECTIVE_KINDS}, got {self.kind!r}")
        if self.direction is None:
            self.direction = "ascend" if self.kind == "advdm" else "descend"
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.fusion_weight < 0:
            raise ConfigError(f"fusion weight must be >= 0, got {self.fusion_weight}")
        if self.kind == "ace-plus" and self.fusion_weight == 0:
            log.warning("ace-plus with fusion weight 0 is plain ace")
        if int(self.mc_samples) < 1:
            raise ConfigError(f"mc_samples must be >= 1, got {self.mc_samples}")
        if self.diffusion_steps < 1:
            raise ConfigError(f"diffusion_steps must be >= 1, got {self.diffusion_steps}")

    @property
    def targeted(self) -> bool:
        return self.kind != "advdm"

    @property
    def sign(self) -> float:
        return 1.0 if self.direction == "ascend" else -1.0

    def describe(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "kind": self.kind,
            "direction": self.direction,
            "mc_samples": self.mc_samples,
            "condition_id": self.condition_id,
            "target_hash": sha256_tensor(self.target) if self.target is not None else None,
        }
        if self.kind == "ace-plus":
            out["fusion_weight"] = self.fusion_weight
        if self.kind == "diffusion-target":
            out["diffusion_start"] = self.diffusion_start
            out["diffusion_steps"] = self.diffusion_steps
        return out


@dataclass
class AdversarialExample:
    x_clean: torch.Tensor
    x_adv: torch.Tensor
    zeta: float
    trace: list[float] = field(default_factory=list)
    seed: int = 0
    kind: str = ""
    pgd_steps: int = 0
    finetune_steps: int = 0
    condition_id: int = 0
    validation_trace: list[float] = field(default_factory=list)

    @property
    def budget_used(self) -> float:
        return float((self.x_adv - self.x_clean).abs().max())

    @property
    def content_hash(self) -> str:
        return sha256_tensor(self.x_adv)

    def summary(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "zeta": self.zeta,
            "budget_used": self.budget_used,
            "seed": self.seed,
            "pgd_steps": self.pgd_steps,
            "finetune_steps": self.finetune_steps,
            "condition_id": self.condition_id,
            "trace_first": self.trace[0] if self.trace else None,
            "trace_last": self.trace[-1] if self.trace else None,
            "content_hash": self.content_hash,
        }
