"""
PGD attack loop with interleaved finetuning of a working copy of the model.

For each of N epochs: M finetune steps of the working model on the whole current
adversarial set, then K signed-gradient PGD steps on every image. The caller's model
is never modified; with M = 0 the loop is plain PGD.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass
from typing import Any, Callable, Sequence

import torch
from torch import nn

from latent_protection.diffusion.autoencoder import AutoencoderBackend
from latent_protection.diffusion.types import NoiseSchedule, as_batch, check_same_shape
from latent_protection.diffusion.unet import MEMORY_MODES, set_memory_mode
from latent_protection.errors import BudgetViolation, ConfigError
from latent_protection.finetune.trainer import FinetuneConfig, Finetuner, prepare_model
from latent_protection.seeding import derive_seed, make_generator

from .objectives import draw_noise, objective_terms, terms_and_gradient
from .types import AdversarialExample, AttackBudget, AttackObjective

log = logging.getLogger("latent_protection.attack.engine")

StepCallback = Callable[[int, int, torch.Tensor, torch.Tensor], None]

# "epoch" keeps one Monte-Carlo (t, eps) set for the K steps of an epoch; "step" redraws every step.
RESAMPLE_MODES = ("step", "epoch")


@dataclass(frozen=True)
class EngineConfig:
    memory_mode: str = "standard"
    device: str = "cpu"
    dtype: str | None = None
    resample: str = "epoch"

    def __post_init__(self) -> None:
        if self.resample not in RESAMPLE_MODES:
            raise ConfigError(f"resample must be one of {RESAMPLE_MODES}, got {self.resample!r}")
        if self.memory_mode not in MEMORY_MODES:
            raise ConfigError(f"memory mode must be one of {MEMORY_MODES}, got {self.memory_mode!r}")
        if self.dtype not in (None, "float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def torch_dtype(self) -> torch.dtype | None:
        return None if self.dtype is None else getattr(torch, self.dtype)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def memory_mode(flag: str, **kwargs: Any) -> EngineConfig:
    """Engine configuration for `standard` or `recompute` (activation checkpointing) mode."""
    return EngineConfig(memory_mode=flag, **kwargs)


def budget_tolerance(dtype: torch.dtype) -> float:
    return 4.0 * torch.finfo(dtype).eps


def check_budget(x_adv: torch.Tensor, x_clean: torch.Tensor, zeta: float, *, tol: float | None = None) -> None:
    slack = budget_tolerance(x_adv.dtype) if tol is None else tol
    used = float((x_adv - x_clean).abs().max()) if x_adv.numel() else 0.0
    if used > zeta + slack:
        raise BudgetViolation(f"l-inf distance {used:.8f} exceeds budget {zeta:.8f}")
    if x_adv.numel() and (float(x_adv.min()) < 0.0 or float(x_adv.max()) > 1.0):
        raise BudgetViolation("adversarial image left the [0, 1] box")


def pgd_step(
    x_adv: torch.Tensor,
    gradient: torch.Tensor,
    budget: AttackBudget,
    x_clean: torch.Tensor,
    direction: str = "descend",
) -> torch.Tensor:
    """Signed step, projection onto the l-inf ball around x_clean, then the [0, 1] box."""
    check_same_shape(x_adv, gradient, "x_adv and gradient")
    check_same_shape(x_adv, x_clean, "x_adv and x_clean")
    sign = 1.0 if direction == "ascend" else -1.0
    stepped = x_adv + sign * budget.step * gradient.sign()
    projected = torch.max(torch.min(stepped, x_clean + budget.zeta), x_clean - budget.zeta)
    return projected.clamp(0.0, 1.0).detach()


def _place(module: Any, device: torch.device, dtype: torch.dtype | None) -> Any:
    if not isinstance(module, nn.Module):
        return module
    placed = copy.deepcopy(module)
    return placed.to(device=device, dtype=dtype) if dtype is not None else placed.to(device=device)


def run_attack(
    x_clean: torch.Tensor | Sequence[torch.Tensor],
    model: nn.Module,
    obj: AttackObjective,
    budget: AttackBudget,
    backend: AutoencoderBackend,
    sched: NoiseSchedule,
    seed: int,
    *,
    conds: torch.Tensor | Sequence[int] | int | None = None,
    finetune_cfg: FinetuneConfig | None = None,
    engine: EngineConfig | None = None,
    step_callback: StepCallback | None = None,
    validation_draws: tuple[torch.Tensor, torch.Tensor] | None = None,
    progress_callback: Callable[[str, float, str], None] | None = None,
) -> list[AdversarialExample]:
    """
    Generate adversarial examples for a set of clean images.

    `step_callback(epoch, k, x_adv, x_clean)` runs after every PGD step. When
    `validation_draws` (t (N,), eps (N, c, h, w)) is given, the objective at those fixed
    draws is recorded after every step in each example's validation_trace.

    With `engine.resample == "epoch"` the K steps of an epoch share one Monte-Carlo
    (t, eps) set drawn at the start of the epoch, so every step descends the same function.
    """
    progress = progress_callback or (lambda phase, frac, msg: None)
    engine = engine or EngineConfig()
    stacked = torch.stack(list(x_clean)) if not isinstance(x_clean, torch.Tensor) else as_batch(x_clean)[0]
    device = torch.device(engine.device)
    dtype = engine.torch_dtype or stacked.dtype
    clean = stacked.detach().to(device=device, dtype=dtype)
    n = clean.shape[0]
    if n == 0:
        raise ConfigError("run_attack needs at least one image")
    if obj.condition_id is not None:
        cond_t = torch.full((n,), int(obj.condition_id), dtype=torch.long, device=device)
    elif conds is None:
        cond_t = torch.zeros((n,), dtype=torch.long, device=device)
    else:
        cond_t = torch.as_tensor(conds, dtype=torch.long, device=device).reshape(-1).expand(n).clone()

    working = _place(model, device, engine.torch_dtype)
    work_backend = _place(backend, device, engine.torch_dtype)
    set_memory_mode(working, engine.memory_mode)
    for p in working.parameters():
        p.requires_grad_(False)
    if isinstance(work_backend, nn.Module):
        for p in work_backend.parameters():
            p.requires_grad_(False)

    M = budget.finetune_steps
    finetuner: Finetuner | None = None
    if M > 0:
        ft_cfg = finetune_cfg or FinetuneConfig(steps=M)
        working = prepare_model(working, ft_cfg, seed=derive_seed(seed, "adapters"))
        finetuner = Finetuner(working, ft_cfg, work_backend, sched, derive_seed(seed, "finetune"))

    obj_gen = make_generator(seed, "objective")
    val_gen = make_generator(seed, "validation")
    x_adv = clean.clone()
    traces: list[list[float]] = [[] for _ in range(n)]
    val_traces: list[list[float]] = [[] for _ in range(n)]
    pgd_count = 0
    ft_count = 0
    total = budget.total_pgd_steps
    log.info(
        "attack %s: %d images, zeta=%.5f, N=%d, K=%d, M=%d, memory=%s, resample=%s",
        obj.kind, n, budget.zeta, budget.epochs, budget.iters_per_epoch, M, engine.memory_mode, engine.resample,
    )
    with torch.no_grad():
        z_ref = work_backend.encode(clean)
    for epoch in range(budget.epochs):
        if finetuner is not None:
            finetuner.step(x_adv, cond_t, n_steps=M)
            ft_count += M
        epoch_draws = draw_noise(obj, sched, z_ref, obj_gen) if engine.resample == "epoch" else None
        for k in range(budget.iters_per_epoch):
            _, grad, terms = terms_and_gradient(
                obj, working, work_backend, sched, x_adv, obj_gen, conds=cond_t, draws=epoch_draws or None
            )
            x_adv = pgd_step(x_adv, grad, budget, clean, obj.direction)
            check_budget(x_adv, clean, budget.zeta)
            pgd_count += 1
            for i, v in enumerate(terms.tolist()):
                traces[i].append(float(v))
            if validation_draws is not None:
                with torch.no_grad():
                    vt, ve = validation_draws
                    vals = objective_terms(obj, working, work_backend, sched, x_adv, val_gen, conds=cond_t, t=vt, eps=ve)
                for i, v in enumerate(vals.tolist()):
                    val_traces[i].append(float(v))
            if step_callback is not None:
                step_callback(epoch, k, x_adv, clean)
            progress("attack", pgd_count / total, f"epoch {epoch + 1}/{budget.epochs} step {k + 1}/{budget.iters_per_epoch}")

    if finetuner is not None and finetuner.history:
        log.info("attack finetune loss %.4f -> %.4f over %d steps", finetuner.history[0], finetuner.history[-1], ft_count)
    examples = [
        AdversarialExample(
            x_clean=clean[i].detach().cpu(),
            x_adv=x_adv[i].detach().cpu(),
            zeta=budget.zeta,
            trace=traces[i],
            seed=int(seed),
            kind=obj.kind,
            pgd_steps=pgd_count,
            finetune_steps=ft_count,
            condition_id=int(cond_t[i]),
            validation_trace=val_traces[i],
        )
        for i in range(n)
    ]
    log.info("attack done: mean budget used %.5f", sum(e.budget_used for e in examples) / n)
    return examples
