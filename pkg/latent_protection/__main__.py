"""
CLI entrypoint for the latent protection toolkit.
Usage:
  python -m latent_protection pipeline --config configs/ace_toy.yaml
  python -m latent_protection dataset --run-dir runs/demo --groups 5 --per-group 20
  python -m latent_protection attack --run-dir runs/demo --kind ace --budget 4/255
  python -m latent_protection evaluate --clean-dir in/ --sdedit-dir out/ --out table.json
  python -m latent_protection defend --run-dir runs/demo --grid
  python -m latent_protection replay runs/demo/manifest.json

Exit codes: 0 success, 2 configuration error, 3 stage failure or replay mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any

from latent_protection.errors import ConfigError, LatentProtectionError, StageFailure

log = logging.getLogger("latent_protection.cli")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="Experiment YAML file")
    p.add_argument("--run-dir", help="Run directory (default: run.out_dir from the config)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="Dotted config override, repeatable")


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="lpt", description="Adversarial protection against latent-diffusion mimicry")
    ap.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = ap.add_subparsers(dest="cmd", required=True)

    # dataset
    p = sub.add_parser("dataset", help="Generate the procedural identity dataset")
    _common(p)
    p.add_argument("--groups", type=int)
    p.add_argument("--per-group", type=int)
    p.add_argument("--holdout-per-group", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_dataset)

    # pretrain
    p = sub.add_parser("pretrain", help="Build the autoencoder and pretrain the toy backbone")
    _common(p)
    p.add_argument("--autoencoder", choices=("analytic", "trained"))
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_pretrain)

    # pattern
    p = sub.add_parser("pattern", help="Render the target pattern")
    _common(p)
    p.add_argument("--target", help='Pattern spec, e.g. "glyph-tile:repetition=8,contrast=1.0"')
    p.set_defaults(func=cmd_pattern)

    # attack
    p = sub.add_parser("attack", help="Protect the training images")
    _common(p)
    p.add_argument("--kind", choices=("advdm", "encoder-target", "ace", "ace-plus", "diffusion-target"))
    p.add_argument("--budget", help='l-inf budget, e.g. "4/255"')
    p.add_argument("--step", help="PGD step size")
    p.add_argument("--steps", type=int, help="PGD steps per epoch")
    p.add_argument("--epochs", type=int)
    p.add_argument("--finetune-steps", type=int, help="Finetune steps per epoch (0 for plain PGD)")
    p.add_argument("--fusion-weight", type=float)
    p.add_argument("--memory-mode", choices=("standard", "recompute"))
    p.set_defaults(func=cmd_attack)

    # finetune
    p = sub.add_parser("finetune", help="Finetune on protected (phi) and clean (theta*) images")
    _common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--rank", type=int)
    p.add_argument("--mode", choices=("adapter", "full"))
    p.set_defaults(func=cmd_finetune)

    # sample
    p = sub.add_parser("sample", help="Generate images from the finetuned models")
    _common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--per-condition", type=int)
    p.set_defaults(func=cmd_sample)

    # sdedit
    p = sub.add_parser("sdedit", help="Edit protected and clean images with the finetuned models")
    _common(p)
    p.add_argument("--strength", type=float)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_sdedit)

    # analyze
    p = sub.add_parser("analyze", help="Estimate score-error and bias fields")
    _common(p)
    p.add_argument("--mc", type=int)
    p.add_argument("--timesteps", help="Comma-separated probe timesteps")
    p.set_defaults(func=cmd_analyze)

    # evaluate
    p = sub.add_parser("evaluate", help="Quality table (run stage, or standalone with --clean-dir)")
    _common(p)
    p.add_argument("--clean-dir", help="SDEdit inputs; enables standalone mode")
    p.add_argument("--sdedit-dir")
    p.add_argument("--sample-dir")
    p.add_argument("--method", default="protected")
    p.add_argument("--provider", help='Embedding provider "module:factory" (default: random projection)')
    p.add_argument("--out", help="Write the JSON table here (standalone mode)")
    p.set_defaults(func=cmd_evaluate)

    # defend
    p = sub.add_parser("defend", help="Purification robustness grid")
    _common(p)
    p.add_argument("--grid", action="store_true", help="Run the seven-configuration defense grid")
    p.add_argument("--spec", action="append", default=[], help='Extra defense, e.g. "jpeg:quality=50"')
    p.add_argument("--pipeline", choices=("sdedit", "finetune+sample"))
    p.set_defaults(func=cmd_defend)

    # pipeline
    p = sub.add_parser("pipeline", help="Run every configured stage and write the manifest")
    _common(p)
    p.add_argument("--force", action="store_true", help="Re-run stages already marked done")
    p.set_defaults(func=cmd_pipeline)

    # replay
    p = sub.add_parser("replay", help="Re-run a manifest and compare output hashes")
    p.add_argument("manifest")
    p.add_argument("--run-dir", help="Replay directory (default: <manifest dir>/replay)")
    p.set_defaults(func=cmd_replay)

    args = ap.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"Configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageFailure as exc:
        print(f"Stage failure: {exc} (manifest: {exc.manifest_path})", file=sys.stderr)
        return EXIT_STAGE
    except LatentProtectionError as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return EXIT_STAGE


def _overrides(args: argparse.Namespace, mapping: dict[str, str]) -> list[str]:
    """--set entries first, then explicit flags, so flags win."""
    out = list(getattr(args, "set", []) or [])
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            out.append(f"{key}={value}")
    return out


def _config(args: argparse.Namespace, mapping: dict[str, str] | None = None) -> dict[str, Any]:
    from latent_protection.config import load_config

    return load_config(args.config, _overrides(args, mapping or {}))


def _run_stage(args: argparse.Namespace, stage: str, mapping: dict[str, str] | None = None) -> int:
    from latent_protection.pipeline import run_pipeline

    cfg = _config(args, mapping)
    manifest = run_pipeline(cfg, args.run_dir, stages=[stage], command=stage, force=True)
    record = manifest.stage(stage)
    print(f"{stage}: {len(record.outputs) if record else 0} output(s) in {args.run_dir or cfg['run']['out_dir']}")
    return EXIT_OK


def cmd_dataset(args) -> int:
    return _run_stage(args, "dataset", {
        "groups": "dataset.groups", "per_group": "dataset.per_group",
        "holdout_per_group": "dataset.holdout_per_group", "size": "dataset.size", "seed": "seeds.dataset",
    })


def cmd_pretrain(args) -> int:
    return _run_stage(args, "pretrain", {"autoencoder": "autoencoder.kind", "steps": "backbone.steps"})


def cmd_pattern(args) -> int:
    return _run_stage(args, "pattern", {"target": "pattern"})


def cmd_attack(args) -> int:
    return _run_stage(args, "attack", {
        "kind": "attack.kind", "budget": "attack.budget", "step": "attack.step", "steps": "attack.iters_per_epoch",
        "epochs": "attack.epochs", "finetune_steps": "attack.finetune_steps",
        "fusion_weight": "attack.fusion_weight", "memory_mode": "attack.memory_mode",
    })


def cmd_finetune(args) -> int:
    return _run_stage(args, "finetune", {"steps": "finetune.steps", "lr": "finetune.lr", "rank": "finetune.rank", "mode": "finetune.mode"})


def cmd_sample(args) -> int:
    return _run_stage(args, "sample", {"steps": "sample.steps", "per_condition": "sample.per_condition"})


def cmd_sdedit(args) -> int:
    return _run_stage(args, "sdedit", {"strength": "sdedit.strength", "steps": "sdedit.steps"})


def cmd_analyze(args) -> int:
    if args.timesteps:
        args.timesteps = "[" + args.timesteps + "]"
    return _run_stage(args, "analyze", {"mc": "analysis.mc", "timesteps": "analysis.timesteps"})


def cmd_evaluate(args) -> int:
    if args.clean_dir is None:
        return _run_stage(args, "evaluate", {"provider": "evaluate.provider"})
    from latent_protection.metrics import evaluate_directories, load_provider

    row = evaluate_directories(
        Path(args.clean_dir), sdedit_dir=args.sdedit_dir, sample_dir=args.sample_dir,
        method=args.method, provider=load_provider(args.provider),
    )
    text = json.dumps({"rows": [row]}, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_defend(args) -> int:
    if args.grid:
        args.set = list(args.set) + ["defense.grid=standard"]
    if args.spec:
        args.set = list(args.set) + [f"defense.specs={json.dumps(args.spec)}"]
    return _run_stage(args, "defend", {"pipeline": "defense.pipeline"})


def cmd_pipeline(args) -> int:
    from latent_protection.pipeline import run_pipeline

    cfg = _config(args)
    manifest = run_pipeline(cfg, args.run_dir, command="pipeline", force=args.force)
    print(f"pipeline: {len(manifest.stages)} stage(s), {len(manifest.output_hashes())} output(s)")
    return EXIT_OK


def cmd_replay(args) -> int:
    from latent_protection.pipeline import replay

    result = replay(Path(args.manifest), args.run_dir)
    if result.identical:
        print(f"replay: {len(result.replayed.output_hashes())} output hash(es) identical")
        return EXIT_OK
    for m in result.mismatches[:20]:
        print(f"mismatch {m['output']}: {m['expected']} != {m['actual']}", file=sys.stderr)
    print(f"replay: {len(result.mismatches)} mismatch(es)", file=sys.stderr)
    return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
