from __future__ import annotations

import logging
from typing import Any, Callable, Sequence

import torch
from torch import nn

from latent_protection.diffusion.autoencoder import AutoencoderBackend
from latent_protection.diffusion.process import sample, sdedit
from latent_protection.diffusion.types import NoiseSchedule
from latent_protection.errors import ConfigError, LatentProtectionError
from latent_protection.finetune.trainer import FinetuneConfig, finetune
from latent_protection.metrics.evaluate import evaluate_generation, evaluate_sdedit
from latent_protection.metrics.ms_ssim import MsSsimConfig
from latent_protection.metrics.protocols import EmbeddingProvider
from latent_protection.seeding import derive_seed

from .purify import DEFAULT_DEFENSE_GRID, SuperResolutionRegistry, purify
from .types import PIPELINES, DefenseSpec, RobustnessReport

log = logging.getLogger("latent_protection.defenses.harness")

# Robustness runs use a wider budget than the main attack default.
ROBUSTNESS_ZETA = 8.0 / 255.0


def _victim(
    images: torch.Tensor,
    conds: list[int],
    *,
    pipeline: str,
    model: nn.Module,
    backend: AutoencoderBackend,
    sched: NoiseSchedule,
    seed: int,
    finetune_cfg: FinetuneConfig,
    sample_steps: int,
    samples_per_condition: int,
    strength: float,
    sdedit_steps: int | None,
    provider: EmbeddingProvider | None,
    ms_cfg: MsSsimConfig | None,
) -> dict[str, Any]:
    if pipeline == "sdedit":
        outputs = torch.cat([
            sdedit(model, backend, sched, images[i:i + 1], strength, conds[i], derive_seed(seed, f"sdedit:{i}"), steps=sdedit_steps)
            for i in range(images.shape[0])
        ])
        return evaluate_sdedit(images, outputs, provider=provider, ms_cfg=ms_cfg)

    phi = finetune(model, (images, torch.tensor(conds)), finetune_cfg, backend, sched, derive_seed(seed, "finetune"))
    f = backend.factor
    shape = (backend.latent_channels, images.shape[-2] // f, images.shape[-1] // f)
    generated = []
    for c in sorted(set(conds)):
        z = sample(
            phi, sched, sample_steps, c, derive_seed(seed, f"sample:{c}"),
            shape=shape, n=samples_per_condition, dtype=images.dtype,
        )
        generated.append(backend.decode(z, clamp=True))
    return evaluate_generation(torch.cat(generated), provider=provider)


def robustness_run(
    adv: torch.Tensor,
    specs: Sequence[DefenseSpec] = DEFAULT_DEFENSE_GRID,
    *,
    pipeline: str,
    model: nn.Module,
    backend: AutoencoderBackend,
    sched: NoiseSchedule,
    seed: int,
    conds: Sequence[int] | None = None,
    clean: torch.Tensor | None = None,
    finetune_cfg: FinetuneConfig | None = None,
    sample_steps: int = 50,
    samples_per_condition: int = 4,
    strength: float = 0.3,
    sdedit_steps: int | None = None,
    provider: EmbeddingProvider | None = None,
    ms_cfg: MsSsimConfig | None = None,
    registry: SuperResolutionRegistry | None = None,
    zeta: float = ROBUSTNESS_ZETA,
    progress_callback: Callable[[str, float, str], None] | None = None,
) -> RobustnessReport:
    """
    Purify `adv` with every spec and run the victim pipeline on the result.
    Columns: "none" (unpurified adversarial images), one per spec, and "clean" when clean images are given.
    Every column shares the same victim seed, so an identity defense reproduces "none".
    A failing spec records its error and the grid continues.
    """
    if pipeline not in PIPELINES:
        raise ConfigError(f"pipeline must be one of {PIPELINES}, got {pipeline!r}")
    progress = progress_callback or (lambda phase, frac, msg: None)
    n = adv.shape[0]
    cond_list = [int(c) for c in conds] if conds is not None else [0] * n
    if len(cond_list) != n:
        raise ConfigError(f"{len(cond_list)} condition ids for {n} images")
    victim_kw = dict(
        pipeline=pipeline, model=model, backend=backend, sched=sched, seed=derive_seed(seed, "victim"),
        finetune_cfg=finetune_cfg or FinetuneConfig(), sample_steps=sample_steps,
        samples_per_condition=samples_per_condition, strength=strength, sdedit_steps=sdedit_steps,
        provider=provider, ms_cfg=ms_cfg,
    )
    report = RobustnessReport(pipeline=pipeline, zeta=float(zeta))
    jobs: list[tuple[str, DefenseSpec | None, torch.Tensor]] = [("none", None, adv)]
    jobs += [(spec.label, spec, adv) for spec in specs]
    if clean is not None:
        jobs.append(("clean", None, clean))
    for k, (label, spec, images) in enumerate(jobs):
        try:
            purified = images if spec is None else purify(images, spec, derive_seed(seed, f"purify:{label}"), registry=registry)
            report.columns[label] = _victim(purified, cond_list, **victim_kw)
        except LatentProtectionError as exc:
            log.warning("defense %s failed: %s", label, exc)
            report.columns[label] = {"error": f"{type(exc).__name__}: {exc}"}
        progress("defend", (k + 1) / len(jobs), label)
    log.info("robustness (%s): %d column(s), %d failed", pipeline, len(report.columns), len(report.failed))
    return report
