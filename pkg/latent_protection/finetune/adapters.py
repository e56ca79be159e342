"""
Low-rank adapters for Linear and Conv2d layers.

Each adapted layer computes base(x) + scale * up(down(x)). `up` starts at zero so a
freshly attached model is output-identical to its base; base weights are frozen.
"""

from __future__ import annotations

import copy
import logging
import math
from pathlib import Path
from typing import Any

import torch
from torch import nn

from latent_protection.errors import ConfigError, UnsupportedVersionError

log = logging.getLogger("latent_protection.finetune.adapters")

ADAPTER_FORMAT = "lpt-adapters"
ADAPTER_VERSION = 1


def _seeded_uniform_(weight: torch.Tensor, fan_in: int, gen: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(max(1, fan_in))
    with torch.no_grad():
        draw = torch.empty(weight.shape, dtype=torch.float64).uniform_(-bound, bound, generator=gen)
        weight.copy_(draw.to(weight.dtype))


class LoRALinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, scale: float = 1.0, gen: torch.Generator | None = None):
        super().__init__()
        self.base = base
        self.rank = int(rank)
        self.scale = float(scale)
        kw = {"device": base.weight.device, "dtype": base.weight.dtype}
        self.down = nn.Linear(base.in_features, self.rank, bias=False, **kw)
        self.up = nn.Linear(self.rank, base.out_features, bias=False, **kw)
        _seeded_uniform_(self.down.weight, base.in_features, gen or torch.Generator().manual_seed(0))
        nn.init.zeros_(self.up.weight)
        for p in self.base.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scale * self.up(self.down(x))

    def delta_weight(self) -> torch.Tensor:
        return self.scale * (self.up.weight @ self.down.weight)

    def merged(self) -> nn.Linear:
        out = copy.deepcopy(self.base)
        with torch.no_grad():
            out.weight.add_(self.delta_weight())
        out.weight.requires_grad_(True)
        if out.bias is not None:
            out.bias.requires_grad_(True)
        return out


class LoRAConv2d(nn.Module):
    def __init__(self, base: nn.Conv2d, rank: int, scale: float = 1.0, gen: torch.Generator | None = None):
        super().__init__()
        if base.groups != 1:
            raise ConfigError("grouped convolutions are not adapter-eligible")
        self.base = base
        self.rank = int(rank)
        self.scale = float(scale)
        kw = {"device": base.weight.device, "dtype": base.weight.dtype}
        self.down = nn.Conv2d(
            base.in_channels,
            self.rank,
            base.kernel_size,
            stride=base.stride,
            padding=base.padding,
            dilation=base.dilation,
            bias=False,
            **kw,
        )
        self.up = nn.Conv2d(self.rank, base.out_channels, 1, bias=False, **kw)
        fan_in = base.in_channels * base.kernel_size[0] * base.kernel_size[1]
        _seeded_uniform_(self.down.weight, fan_in, gen or torch.Generator().manual_seed(0))
        nn.init.zeros_(self.up.weight)
        for p in self.base.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scale * self.up(self.down(x))

    def delta_weight(self) -> torch.Tensor:
        return self.scale * torch.einsum("or,rikl->oikl", self.up.weight[:, :, 0, 0], self.down.weight)

    def merged(self) -> nn.Conv2d:
        out = copy.deepcopy(self.base)
        with torch.no_grad():
            out.weight.add_(self.delta_weight())
        out.weight.requires_grad_(True)
        if out.bias is not None:
            out.bias.requires_grad_(True)
        return out


ADAPTER_TYPES = (LoRALinear, LoRAConv2d)


def get_parent_module(model: nn.Module, full_name: str) -> nn.Module:
    parent = model
    for part in full_name.split(".")[:-1]:
        parent = getattr(parent, part)
    return parent


def _eligible(model: nn.Module) -> list[tuple[str, nn.Module]]:
    found: list[tuple[str, nn.Module]] = []
    for name, module in model.named_modules():
        if not name or _inside_adapter(model, name):
            continue
        if isinstance(module, nn.Linear) or (isinstance(module, nn.Conv2d) and module.groups == 1):
            found.append((name, module))
    return found


def _inside_adapter(model: nn.Module, name: str) -> bool:
    parts = name.split(".")
    node = model
    for part in parts[:-1]:
        node = getattr(node, part)
        if isinstance(node, ADAPTER_TYPES):
            return True
    return False


def has_adapters(model: nn.Module) -> bool:
    return any(isinstance(m, ADAPTER_TYPES) for m in model.modules())


def attach_adapters(model: nn.Module, rank: int, *, scale: float = 1.0, seed: int = 0, inplace: bool = False) -> nn.Module:
    """Wrap every Linear/Conv2d layer in a LoRA adapter; all non-adapter parameters are frozen."""
    if int(rank) <= 0:
        raise ConfigError(f"adapter rank must be >= 1, got {rank}")
    target = model if inplace else copy.deepcopy(model)
    layers = _eligible(target)
    if not layers:
        raise ConfigError(f"{type(model).__name__} has no adapter-eligible layers")
    gen = torch.Generator().manual_seed(int(seed))
    for p in target.parameters():
        p.requires_grad_(False)
    for name, layer in layers:
        parent = get_parent_module(target, name)
        leaf = name.split(".")[-1]
        if isinstance(layer, nn.Linear):
            wrapped: nn.Module = LoRALinear(layer, rank, scale, gen)
        else:
            wrapped = LoRAConv2d(layer, rank, scale, gen)
        setattr(parent, leaf, wrapped)
    log.debug("attached rank-%d adapters to %d layers", rank, len(layers))
    return target


def adapter_parameters(model: nn.Module) -> list[nn.Parameter]:
    params: list[nn.Parameter] = []
    for module in model.modules():
        if isinstance(module, ADAPTER_TYPES):
            params.extend(module.down.parameters())
            params.extend(module.up.parameters())
    return params


def adapter_state_dict(model: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items() if _is_adapter_key(model, k)}


def _is_adapter_key(model: nn.Module, key: str) -> bool:
    module_name = key.rsplit(".", 1)[0]
    if module_name.split(".")[-1] not in ("down", "up"):
        return False
    return isinstance(get_parent_module(model, module_name), ADAPTER_TYPES)


def merge_adapters(model: nn.Module, *, inplace: bool = False) -> nn.Module:
    """Fold every adapter delta into its base layer and restore plain, trainable layers."""
    target = model if inplace else copy.deepcopy(model)
    names = [name for name, m in target.named_modules() if isinstance(m, ADAPTER_TYPES)]
    for name in names:
        parent = get_parent_module(target, name)
        leaf = name.split(".")[-1]
        setattr(parent, leaf, getattr(parent, leaf).merged())
    for p in target.parameters():
        p.requires_grad_(True)
    return target


def save_adapters(model: nn.Module, path: Path | str, *, metadata: dict[str, Any] | None = None) -> Path:
    adapters = [m for m in model.modules() if isinstance(m, ADAPTER_TYPES)]
    if not adapters:
        raise ConfigError("model carries no adapters to save")
    payload = {
        "format": ADAPTER_FORMAT,
        "version": ADAPTER_VERSION,
        "rank": adapters[0].rank,
        "scale": adapters[0].scale,
        "state": adapter_state_dict(model),
        "metadata": dict(metadata or {}),
    }
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, out)
    return out


def load_adapters(model: nn.Module, path: Path | str, *, merge: bool = True) -> nn.Module:
    """Attach adapters to a copy of `model`, load saved factors, and fold them in when `merge`."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("format") != ADAPTER_FORMAT:
        raise UnsupportedVersionError(f"{path} is not an adapter checkpoint")
    if int(payload.get("version", -1)) != ADAPTER_VERSION:
        raise UnsupportedVersionError(f"adapter checkpoint version {payload.get('version')} is not supported")
    adapted = attach_adapters(model, int(payload["rank"]), scale=float(payload["scale"]))
    missing, unexpected = adapted.load_state_dict(payload["state"], strict=False)
    if unexpected:
        raise ConfigError(f"adapter checkpoint has keys the model lacks: {unexpected[:3]}")
    return merge_adapters(adapted, inplace=True) if merge else adapted


def count_parameters(params: list[nn.Parameter] | nn.Module) -> int:
    items = params.parameters() if isinstance(params, nn.Module) else params
    return sum(p.numel() for p in items)


def set_adapter_trainable(model: nn.Module) -> None:
    for p in model.parameters():
        p.requires_grad_(False)
    for p in adapter_parameters(model):
        p.requires_grad_(True)
