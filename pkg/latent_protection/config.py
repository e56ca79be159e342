"""
Experiment configuration: defaults, then one YAML file, then CLI flags (dotted keys).
Every value taken from a file or flag is logged with its source. The environment is not read.
"""

from __future__ import annotations

import copy
import logging
from pathlib import Path
from typing import Any, Iterable, Mapping

import yaml

from latent_protection.errors import ConfigError

log = logging.getLogger("latent_protection.config")

STAGE_ORDER = ("dataset", "pretrain", "pattern", "attack", "finetune", "sample", "sdedit", "analyze", "evaluate", "defend")
SEED_NAMES = ("dataset", "autoencoder", "backbone", "attack", "finetune", "sample", "sdedit", "analysis", "defense")

DEFAULT_CONFIG: dict[str, Any] = {
    "run": {
        "out_dir": "runs/ace_toy",
        "device": "cpu",
        "stages": ["dataset", "pretrain", "pattern", "attack", "finetune", "sample", "sdedit", "analyze", "evaluate"],
    },
    "seeds": {name: i for i, name in enumerate(SEED_NAMES)},
    "dataset": {"groups": 5, "per_group": 20, "holdout_per_group": 4, "size": 32},
    "schedule": {"T": 1000, "beta0": 1e-4, "betaT": 2e-2},
    "autoencoder": {"kind": "analytic", "factor": 2, "latent_channels": 4, "width": 32, "steps": 2000, "lr": 1e-3},
    "backbone": {"base_channels": 32, "steps": 3000, "lr": 2e-4, "batch_size": 32},
    "pattern": "glyph-tile:repetition=8,contrast=1.0",
    "attack": {
        "kind": "ace",
        "budget": "4/255",
        "step": 5e-3,
        "epochs": 5,
        "iters_per_epoch": 10,
        "finetune_steps": 10,
        "fusion_weight": 100.0,
        "mc_samples": 4,
        "memory_mode": "standard",
        "resample": "epoch",
        "dtype": None,
        "finetune": {"lr": 1e-5, "rank": 4, "optimizer": "sgd"},
    },
    "finetune": {"steps": 200, "lr": 1e-4, "rank": 4, "mode": "adapter", "optimizer": "adamw", "batch_size": None},
    "sample": {"steps": 50, "per_condition": 4},
    "sdedit": {"strength": 0.3, "steps": None},
    "analysis": {"timesteps": [100, 300, 500, 700, 900], "mc": 64, "heatmaps": True},
    "evaluate": {"provider": None, "dim": 64},
    "defense": {"grid": "standard", "specs": [], "pipeline": "sdedit", "budget": "8/255"},
}


def _deep_merge(base: dict[str, Any], override: Mapping[str, Any]) -> dict[str, Any]:
    for key, value in override.items():
        if key in base and isinstance(base[key], dict) and isinstance(value, Mapping):
            _deep_merge(base[key], value)
        else:
            base[key] = copy.deepcopy(value)
    return base


def _leaves(tree: Mapping[str, Any], prefix: str = "") -> Iterable[tuple[str, Any]]:
    for key, value in tree.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, Mapping) and value:
            yield from _leaves(value, dotted + ".")
        else:
            yield dotted, value


def parse_override(text: str) -> tuple[str, Any]:
    """`attack.budget=8/255` -> ("attack.budget", "8/255"); values are parsed as YAML scalars."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {text!r} must look like key.path=value")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value in {text!r}: {exc}") from exc
    return key.strip(), value


def set_dotted(cfg: dict[str, Any], key: str, value: Any) -> None:
    parts = key.split(".")
    node = cfg
    for part in parts[:-1]:
        child = node.get(part)
        if child is None:
            child = node[part] = {}
        if not isinstance(child, dict):
            raise ConfigError(f"cannot set {key!r}: {part!r} is not a section")
        node = child
    node[parts[-1]] = value


def get_dotted(cfg: Mapping[str, Any], key: str, default: Any = None) -> Any:
    node: Any = cfg
    for part in key.split("."):
        if not isinstance(node, Mapping) or part not in node:
            return default
        node = node[part]
    return node


def load_config(
    path: Path | str | None = None,
    overrides: Iterable[str] | Mapping[str, Any] | None = None,
) -> dict[str, Any]:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        try:
            loaded = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p} is not valid YAML: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{p} must hold a mapping at the top level")
        for key, value in _leaves(loaded):
            log.info("config %s = %r (file %s)", key, value, p.name)
        _deep_merge(cfg, loaded)
    items = overrides.items() if isinstance(overrides, Mapping) else (parse_override(o) for o in overrides or ())
    for key, value in items:
        log.info("config %s = %r (flag)", key, value)
        set_dotted(cfg, key, value)
    validate_config(cfg)
    return cfg


def load_resolved(path: Path | str) -> dict[str, Any]:
    """Re-read a config written by dump_config; no per-key source logging."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"resolved config {p} does not exist")
    cfg = _deep_merge(copy.deepcopy(DEFAULT_CONFIG), yaml.safe_load(p.read_text(encoding="utf-8")) or {})
    validate_config(cfg)
    return cfg


def validate_config(cfg: Mapping[str, Any]) -> None:
    stages = get_dotted(cfg, "run.stages", [])
    if not isinstance(stages, list) or not stages:
        raise ConfigError("run.stages must be a nonempty list")
    unknown = [s for s in stages if s not in STAGE_ORDER]
    if unknown:
        raise ConfigError(f"unknown stage(s) {unknown}; expected names from {STAGE_ORDER}")
    seeds = cfg.get("seeds")
    if not isinstance(seeds, Mapping):
        raise ConfigError("seeds must be a mapping of name -> int")
    for name, value in seeds.items():
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"seed {name!r} must be an integer, got {value!r}")


def ordered_stages(cfg: Mapping[str, Any]) -> list[str]:
    """Requested stages in pipeline order, duplicates removed."""
    wanted = set(get_dotted(cfg, "run.stages", []))
    return [s for s in STAGE_ORDER if s in wanted]


def seed_for(cfg: Mapping[str, Any], name: str) -> int:
    seeds = cfg.get("seeds") or {}
    if name not in seeds:
        raise ConfigError(f"no seed named {name!r}; known: {sorted(seeds)}")
    return int(seeds[name])


def dump_config(cfg: Mapping[str, Any], path: Path | str) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(yaml.safe_dump(dict(cfg), sort_keys=True), encoding="utf-8")
    return out
