"""
Experiment stages. Each reads what earlier stages wrote under the run directory and
returns the files it produced. Run layout:

  dataset/            train/ and holdout/ identity PNGs, index.json
  models/             backbone.pt
  pattern/            target.png, target.lptf, pattern.json
  attack/             adv/ (8-bit protected PNGs mirroring dataset/train), examples.json
  finetune/           phi.pt (on protected images), theta_star.pt (on clean images)
  sample/<role>/      generated images per identity
  sdedit/<role>/      SDEdit outputs mirroring their inputs
  analyze/            summary.json, fields/, heatmaps/
  evaluate/           table.json
  defend/             report.json
"""

from __future__ import annotations

import contextlib
import json
import logging
import math
from pathlib import Path
from typing import Any, Iterator

import torch

from latent_protection.analysis.heatmaps import render_heatmap
from latent_protection.analysis.runner import analyze_run
from latent_protection.attack.engine import EngineConfig, run_attack
from latent_protection.attack.export import export_adversarial_png, quantize_adversarial
from latent_protection.attack.types import AdversarialExample, AttackBudget, AttackObjective, parse_budget
from latent_protection.config import get_dotted, seed_for
from latent_protection.defenses.harness import robustness_run
from latent_protection.defenses.purify import DEFAULT_DEFENSE_GRID
from latent_protection.defenses.types import DefenseSpec
from latent_protection.diffusion.autoencoder import build_autoencoder, train_autoencoder
from latent_protection.diffusion.process import sample, sdedit
from latent_protection.diffusion.schedule import build_linear_schedule
from latent_protection.diffusion.training import pretrain_backbone
from latent_protection.diffusion.unet import ToyUNet, UNetConfig
from latent_protection.errors import ConfigError
from latent_protection.finetune.adapters import has_adapters, merge_adapters, save_adapters
from latent_protection.finetune.trainer import FinetuneConfig, finetune
from latent_protection.io.arrays import decode_tensor, encode_tensor, export_array
from latent_protection.io.checkpoints import Checkpoint, load_checkpoint, save_checkpoint
from latent_protection.io.dataset import ToyDatasetSpec, generate_dataset, load_dataset
from latent_protection.io.images import from_uint8, load_png, save_png
from latent_protection.metrics.clip import RandomProjectionProvider, load_provider
from latent_protection.metrics.evaluate import evaluate_directories
from latent_protection.seeding import derive_seed
from latent_protection.targets.patterns import PatternSpec, encode_target, generate_pattern, latent_sign_alternations, sign_changes

from .types import StageContext, StageResult

log = logging.getLogger("latent_protection.pipeline.stages")

ROLES = ("phi", "theta_star")


def _jsonable(value: Any) -> Any:
    if isinstance(value, float):
        return None if math.isnan(value) or math.isinf(value) else value
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _write_json(path: Path, payload: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True), encoding="utf-8")
    return path


@contextlib.contextmanager
def _seeded_init(seed: int) -> Iterator[None]:
    """Module construction draws from torch's default generator; isolate it under a named seed."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def _backbone(ctx: StageContext, name: str = "backbone") -> Checkpoint:
    path = ctx.path("models", "backbone.pt") if name == "backbone" else ctx.path("finetune", f"{name}.pt")
    if not path.is_file():
        raise ConfigError(f"{path} is missing; run the stage that produces it first")
    ck = load_checkpoint(path)
    ck.model.to(ctx.device)
    ck.backend.to(ctx.device)
    return ck


def _train(ctx: StageContext) -> tuple[torch.Tensor, torch.Tensor, list[Path]]:
    images, groups, paths = load_dataset(ctx.path("dataset"), split="train")
    return images, groups, [p.relative_to(ctx.path("dataset", "train")) for p in paths]


def _protected(ctx: StageContext, rels: list[Path]) -> torch.Tensor:
    adv_dir = ctx.path("attack", "adv")
    missing = [r for r in rels if not (adv_dir / r).is_file()]
    if missing:
        raise ConfigError(f"{len(missing)} protected image(s) missing under {adv_dir}; run the attack stage")
    return torch.stack([load_png(adv_dir / r) for r in rels])


def _files(root: Path) -> list[Path]:
    return sorted(p for p in root.rglob("*") if p.is_file())


def _select(groups: torch.Tensor, per_group: int | None) -> torch.Tensor:
    """Indices of the first `per_group` images of every identity (all when None)."""
    if per_group is None:
        return torch.arange(groups.numel())
    keep = []
    for g in sorted(set(groups.tolist())):
        keep.extend((groups == g).nonzero()[:, 0][: int(per_group)].tolist())
    return torch.tensor(keep, dtype=torch.long)


def _objective(ctx: StageContext, ck: Checkpoint) -> AttackObjective:
    cfg = ctx.config["attack"]
    obj = AttackObjective(kind=str(cfg["kind"]), fusion_weight=float(cfg["fusion_weight"]), mc_samples=int(cfg["mc_samples"]))
    if obj.targeted:
        target_path = ctx.path("pattern", "target.lptf")
        if not target_path.is_file():
            raise ConfigError(f"targeted attack {obj.kind} needs {target_path}; run the pattern stage")
        image, meta = decode_tensor(target_path.read_bytes())
        spec = PatternSpec.from_dict(meta["spec"]) if "spec" in meta else None
        obj.target = encode_target(image.to(ctx.device), ck.backend, spec=spec).latent
    return obj


def _attack_budget(ctx: StageContext, zeta: float | None = None) -> AttackBudget:
    cfg = ctx.config["attack"]
    return AttackBudget(
        zeta=parse_budget(cfg["budget"]) if zeta is None else zeta,
        step=parse_budget(cfg["step"]),
        iters_per_epoch=int(cfg["iters_per_epoch"]),
        epochs=int(cfg["epochs"]),
        finetune_steps=int(cfg["finetune_steps"]),
    )


def _attack_groups(
    ctx: StageContext,
    ck: Checkpoint,
    images: torch.Tensor,
    groups: torch.Tensor,
    budget: AttackBudget,
    seed: int,
) -> list[AdversarialExample]:
    """Protect each identity's images together, in dataset order."""
    cfg = ctx.config["attack"]
    obj = _objective(ctx, ck)
    ft_cfg = None
    if budget.finetune_steps > 0:
        ft_cfg = FinetuneConfig.from_dict({**dict(cfg.get("finetune") or {}), "steps": budget.finetune_steps})
    engine = EngineConfig(
        memory_mode=str(cfg["memory_mode"]), device=ctx.device, dtype=cfg.get("dtype"), resample=str(cfg.get("resample", "epoch")),
    )
    examples: list[AdversarialExample | None] = [None] * images.shape[0]
    ids = sorted(set(groups.tolist()))
    for k, g in enumerate(ids):
        idx = (groups == g).nonzero()[:, 0]
        out = run_attack(
            images[idx], ck.model, obj, budget, ck.backend, ck.sched, derive_seed(seed, f"group:{g}"),
            conds=groups[idx], finetune_cfg=ft_cfg, engine=engine,
            progress_callback=lambda phase, frac, msg, k=k: ctx.progress("attack", (k + frac) / len(ids), f"identity {g}: {msg}"),
        )
        for i, ex in zip(idx.tolist(), out):
            examples[i] = ex
    return [ex for ex in examples if ex is not None]


class DatasetStage:
    name = "dataset"

    def run(self, ctx: StageContext) -> StageResult:
        spec = ToyDatasetSpec.from_dict({**ctx.config["dataset"], "seed": seed_for(ctx.config, "dataset")})
        index = generate_dataset(spec, ctx.path("dataset"))
        return StageResult(outputs=_files(ctx.path("dataset")), details={"images": len(index["images"]), "spec": spec.to_dict()})


class PretrainStage:
    name = "pretrain"

    def run(self, ctx: StageContext) -> StageResult:
        cfg = ctx.config
        images, groups, _ = _train(ctx)
        images, groups = images.to(ctx.device), groups.to(ctx.device)
        sched = build_linear_schedule(**cfg["schedule"])
        ae = cfg["autoencoder"]
        ae_seed = seed_for(cfg, "autoencoder")
        with _seeded_init(derive_seed(ae_seed, "init")):
            backend = build_autoencoder(
                str(ae["kind"]), factor=int(ae["factor"]), latent_channels=int(ae["latent_channels"]),
                image_channels=images.shape[1], width=int(ae["width"]),
            ).to(ctx.device)
        ae_losses = train_autoencoder(
            backend, images, steps=int(ae["steps"]), lr=float(ae["lr"]), seed=ae_seed, progress_callback=ctx.progress_callback,
        )
        for p in backend.parameters():
            p.requires_grad_(False)
        bb = cfg["backbone"]
        bb_seed = seed_for(cfg, "backbone")
        unet_cfg = UNetConfig(
            latent_channels=backend.latent_channels,
            base_channels=int(bb["base_channels"]),
            condition_vocab=int(get_dotted(cfg, "dataset.groups", 5)),
        )
        with _seeded_init(derive_seed(bb_seed, "init")):
            model = ToyUNet(unet_cfg).to(ctx.device)
        losses = pretrain_backbone(
            model, images, groups, backend, sched, steps=int(bb["steps"]), lr=float(bb["lr"]),
            batch_size=int(bb["batch_size"]), seed=bb_seed, progress_callback=ctx.progress_callback,
        )
        path = ctx.path("models", "backbone.pt")
        model_hash = save_checkpoint(path, model.cpu(), backend.cpu(), sched, metadata={"stage": self.name})
        details = {
            "model_hash": model_hash,
            "autoencoder_final_loss": ae_losses[-1] if ae_losses else None,
            "backbone_final_loss": losses[-1] if losses else None,
        }
        return StageResult(outputs=[path], details=details)


class PatternStage:
    name = "pattern"

    def run(self, ctx: StageContext) -> StageResult:
        size = int(get_dotted(ctx.config, "dataset.size", 32))
        spec = PatternSpec.parse(str(ctx.config["pattern"]), size=(size, size, 3))
        image = generate_pattern(spec)
        out = ctx.path("pattern")
        png = save_png(image, out / "target.png")
        raw = out / "target.lptf"
        raw.write_bytes(encode_tensor(image, {"spec": spec.to_dict()}))
        info: dict[str, Any] = {"spec": spec.to_dict(), "row_sign_changes": sign_changes(image[0, 0])}
        backbone = ctx.path("models", "backbone.pt")
        if backbone.is_file():
            ck = load_checkpoint(backbone)
            info["latent_sign_alternations"] = latent_sign_alternations(encode_target(image, ck.backend, spec=spec).latent)
        meta = _write_json(out / "pattern.json", info)
        return StageResult(outputs=[png, raw, meta], details=info)


class AttackStage:
    name = "attack"

    def run(self, ctx: StageContext) -> StageResult:
        ck = _backbone(ctx)
        images, groups, rels = _train(ctx)
        budget = _attack_budget(ctx)
        examples = _attack_groups(ctx, ck, images, groups, budget, seed_for(ctx.config, "attack"))
        adv_dir = ctx.path("attack", "adv")
        outputs = [export_adversarial_png(ex, adv_dir / rel) for ex, rel in zip(examples, rels)]
        summaries = [{"path": rel.as_posix(), **ex.summary(), "trace": ex.trace} for ex, rel in zip(examples, rels)]
        outputs.append(_write_json(ctx.path("attack", "examples.json"), {"budget": budget.to_dict(), "examples": summaries}))
        details = {
            "kind": examples[0].kind if examples else None,
            "budget": budget.to_dict(),
            "mean_budget_used": sum(e.budget_used for e in examples) / max(1, len(examples)),
            "memory_mode": str(ctx.config["attack"]["memory_mode"]),
            "resample": str(ctx.config["attack"].get("resample", "epoch")),
        }
        return StageResult(outputs=outputs, inputs={"backbone": ck.model_hash}, details=details)


class FinetuneStage:
    name = "finetune"

    def run(self, ctx: StageContext) -> StageResult:
        ck = _backbone(ctx)
        images, groups, rels = _train(ctx)
        adv = _protected(ctx, rels)
        ft_cfg = FinetuneConfig.from_dict(ctx.config["finetune"])
        seed = seed_for(ctx.config, "finetune")
        outputs: list[Path] = []
        details: dict[str, Any] = {"config": ft_cfg.to_dict()}
        # Same seed for both roles so only the training images differ.
        for role, data in (("phi", adv), ("theta_star", images)):
            tuned = finetune(
                ck.model, (data.to(ctx.device), groups.to(ctx.device)), ft_cfg, ck.backend, ck.sched, seed,
                progress_callback=ctx.progress_callback,
            )
            if has_adapters(tuned):
                outputs.append(save_adapters(tuned, ctx.path("finetune", f"{role}.adapters.pt"), metadata={"role": role}))
                tuned = merge_adapters(tuned)
            path = ctx.path("finetune", f"{role}.pt")
            details[f"{role}_hash"] = save_checkpoint(path, tuned.cpu(), ck.backend.cpu(), ck.sched, metadata={"role": role})
            ck.backend.to(ctx.device)
            outputs.append(path)
        return StageResult(outputs=outputs, inputs={"backbone": ck.model_hash}, details=details)


class SampleStage:
    name = "sample"

    def run(self, ctx: StageContext) -> StageResult:
        cfg = ctx.config["sample"]
        seed = seed_for(ctx.config, "sample")
        groups = int(get_dotted(ctx.config, "dataset.groups", 5))
        size = int(get_dotted(ctx.config, "dataset.size", 32))
        outputs: list[Path] = []
        for role in ROLES:
            ck = _backbone(ctx, role)
            f = ck.backend.factor
            shape = (ck.backend.latent_channels, size // f, size // f)
            for g in range(groups):
                z = sample(
                    ck.model, ck.sched, int(cfg["steps"]), g, derive_seed(seed, f"group:{g}"),
                    shape=shape, n=int(cfg["per_condition"]), device=ctx.device,
                )
                images = ck.backend.decode(z, clamp=True)
                for j, img in enumerate(images):
                    outputs.append(save_png(img, ctx.path("sample", role, f"group_{g:02d}", f"sample_{j:03d}.png")))
                ctx.progress("sample", (g + 1) / groups, f"{role} identity {g}")
        return StageResult(outputs=outputs, details={"per_condition": int(cfg["per_condition"]), "steps": int(cfg["steps"])})


class SdeditStage:
    name = "sdedit"

    def run(self, ctx: StageContext) -> StageResult:
        cfg = ctx.config["sdedit"]
        seed = seed_for(ctx.config, "sdedit")
        images, groups, rels = _train(ctx)
        inputs = {"phi": _protected(ctx, rels), "theta_star": images}
        steps = cfg.get("steps")
        outputs: list[Path] = []
        for role in ROLES:
            ck = _backbone(ctx, role)
            for i, rel in enumerate(rels):
                x = inputs[role][i:i + 1].to(ctx.device)
                out = sdedit(
                    ck.model, ck.backend, ck.sched, x, float(cfg["strength"]), int(groups[i]),
                    derive_seed(seed, f"image:{i}"), steps=None if steps is None else int(steps),
                )
                outputs.append(save_png(out[0], ctx.path("sdedit", role, rel)))
                ctx.progress("sdedit", (i + 1) / len(rels), f"{role} {rel.as_posix()}")
        return StageResult(outputs=outputs, details={"strength": float(cfg["strength"]), "steps": steps})


class AnalyzeStage:
    name = "analyze"

    def run(self, ctx: StageContext) -> StageResult:
        cfg = ctx.config["analysis"]
        theta = _backbone(ctx)
        phi = _backbone(ctx, "phi")
        theta_star = _backbone(ctx, "theta_star")
        images, groups, rels = _train(ctx)
        adv = _protected(ctx, rels)
        keep = _select(groups, cfg.get("images_per_group"))
        holdout, holdout_groups, _ = load_dataset(ctx.path("dataset"), split="holdout")
        bundle = analyze_run(
            theta.model, phi.model, images[keep].to(ctx.device), adv[keep].to(ctx.device), holdout.to(ctx.device),
            backend=theta.backend, sched=theta.sched, seed=seed_for(ctx.config, "analysis"),
            timesteps=[int(t) for t in cfg["timesteps"]], mc=int(cfg["mc"]), theta_star=theta_star.model,
            conds=groups[keep].tolist(), holdout_conds=holdout_groups.tolist(), progress_callback=ctx.progress_callback,
        )
        out = ctx.path("analyze")
        outputs: list[Path] = []
        for t in bundle.timesteps:
            for i, fld in enumerate(bundle.eps_adv[t]):
                outputs.append(export_array(fld, out / "fields" / "eps_adv" / f"t{t:04d}_{i:03d}.lptf"))
            for i, fld in enumerate(bundle.reverse_bias[t]):
                outputs.append(export_array(fld, out / "fields" / "reverse_bias" / f"t{t:04d}_{i:03d}.lptf"))
            for j, fld in enumerate(bundle.sampling_bias[t]):
                outputs.append(export_array(fld, out / "fields" / "sampling_bias" / f"t{t:04d}_{j:03d}.lptf"))
        for j, fld in enumerate(bundle.sampling_error):
            outputs.append(export_array(fld, out / "fields" / "sampling_error" / f"holdout_{j:03d}.lptf"))
        if cfg.get("heatmaps", True):
            for t in bundle.timesteps:
                if bundle.eps_adv[t]:
                    outputs.append(render_heatmap(bundle.eps_adv[t][0], out / "heatmaps" / f"eps_adv_t{t:04d}.png"))
            if bundle.sampling_error:
                outputs.append(render_heatmap(bundle.sampling_error[0], out / "heatmaps" / "sampling_error.png"))
        payload = {"summary": bundle.summary, "reports": {k: r.to_dict() for k, r in sorted(bundle.reports.items())}}
        outputs.append(_write_json(out / "summary.json", payload))
        inputs = {"theta": theta.model_hash, "phi": phi.model_hash, "theta_star": theta_star.model_hash}
        return StageResult(outputs=outputs, inputs=inputs, details=_jsonable(bundle.summary))


def _provider(ctx: StageContext):
    cfg = ctx.config.get("evaluate") or {}
    target = cfg.get("provider")
    if target in (None, "", "random-projection"):
        return RandomProjectionProvider(dim=int(cfg.get("dim", 64)))
    return load_provider(str(target))


class EvaluateStage:
    name = "evaluate"

    def run(self, ctx: StageContext) -> StageResult:
        provider = _provider(ctx)
        rows = [
            evaluate_directories(
                ctx.path("attack", "adv"), sdedit_dir=ctx.path("sdedit", "phi"), sample_dir=ctx.path("sample", "phi"),
                method=str(ctx.config["attack"]["kind"]), provider=provider,
            ),
            evaluate_directories(
                ctx.path("dataset", "train"), sdedit_dir=ctx.path("sdedit", "theta_star"),
                sample_dir=ctx.path("sample", "theta_star"), method="no-protection", provider=provider,
            ),
        ]
        path = _write_json(ctx.path("evaluate", "table.json"), {"rows": rows})
        return StageResult(outputs=[path], details={"rows": rows})


class DefendStage:
    name = "defend"

    def run(self, ctx: StageContext) -> StageResult:
        cfg = ctx.config["defense"]
        ck = _backbone(ctx)
        images, groups, _ = _train(ctx)
        keep = _select(groups, cfg.get("images_per_group", 4))
        images, groups = images[keep], groups[keep]
        zeta = parse_budget(cfg.get("budget", "8/255"))
        seed = seed_for(ctx.config, "defense")
        examples = _attack_groups(ctx, ck, images, groups, _attack_budget(ctx, zeta), derive_seed(seed, "attack"))
        adv = torch.stack([from_uint8(quantize_adversarial(ex)[1]) for ex in examples])
        specs: list[DefenseSpec] = list(DEFAULT_DEFENSE_GRID) if cfg.get("grid") == "standard" else []
        specs += [DefenseSpec.parse(str(s)) for s in cfg.get("specs") or []]
        if not specs:
            raise ConfigError("defense stage needs defense.grid: standard or at least one entry in defense.specs")
        sample_cfg = ctx.config["sample"]
        report = robustness_run(
            adv.to(ctx.device), specs,
            pipeline=str(cfg.get("pipeline", "sdedit")), model=ck.model, backend=ck.backend, sched=ck.sched, seed=seed,
            conds=groups.tolist(), clean=images.to(ctx.device),
            finetune_cfg=FinetuneConfig.from_dict(ctx.config["finetune"]),
            sample_steps=int(sample_cfg["steps"]), samples_per_condition=int(sample_cfg["per_condition"]),
            strength=float(ctx.config["sdedit"]["strength"]), sdedit_steps=ctx.config["sdedit"].get("steps"),
            provider=_provider(ctx), zeta=zeta, progress_callback=ctx.progress_callback,
        )
        path = _write_json(ctx.path("defend", "report.json"), report.to_dict())
        return StageResult(outputs=[path], inputs={"backbone": ck.model_hash}, details={"failed": report.failed})


STAGES = {
    cls.name: cls
    for cls in (
        DatasetStage, PretrainStage, PatternStage, AttackStage, FinetuneStage,
        SampleStage, SdeditStage, AnalyzeStage, EvaluateStage, DefendStage,
    )
}


def resolve_stage(name: str):
    try:
        return STAGES[name]()
    except KeyError:
        raise ConfigError(f"unknown stage {name!r}; expected one of {sorted(STAGES)}") from None
