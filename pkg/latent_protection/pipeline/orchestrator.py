from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import luigi

from latent_protection.config import STAGE_ORDER, dump_config, ordered_stages
from latent_protection.errors import ConfigError, StageFailure
from latent_protection.io.manifest import MANIFEST_NAME, ExperimentManifest

from .tasks import CONFIG_NAME, StageTask, marker_path, read_record

log = logging.getLogger("latent_protection.pipeline.orchestrator")


def _chain(cfg: dict[str, Any], stages: Sequence[str] | None) -> list[str]:
    if stages is None:
        return ordered_stages(cfg)
    unknown = [s for s in stages if s not in STAGE_ORDER]
    if unknown:
        raise ConfigError(f"unknown stage(s) {unknown}")
    wanted = set(stages)
    return [s for s in STAGE_ORDER if s in wanted]


def run_pipeline(
    cfg: dict[str, Any],
    run_dir: Path | str | None = None,
    *,
    stages: Sequence[str] | None = None,
    command: str = "pipeline",
    force: bool = False,
) -> ExperimentManifest:
    """
    Run the requested stages in order through luigi and write <run_dir>/manifest.json.
    Stages already marked done are skipped unless `force`. Records of stages run earlier
    in the same directory are kept in the manifest.
    """
    out = Path(run_dir or cfg["run"]["out_dir"])
    chain = _chain(cfg, stages)
    if not chain:
        raise ConfigError("no stages to run")
    out.mkdir(parents=True, exist_ok=True)
    if force:
        for stage in chain:
            marker_path(out, stage).unlink(missing_ok=True)
    dump_config(cfg, out / CONFIG_NAME)
    manifest_path = out / MANIFEST_NAME
    manifest = ExperimentManifest.load(manifest_path) if manifest_path.is_file() else None
    if manifest is None:
        manifest = ExperimentManifest(command=command, config=cfg, seeds=dict(cfg["seeds"]))
    else:
        manifest.command, manifest.config, manifest.seeds = command, cfg, dict(cfg["seeds"])

    log.info("running %s in %s", " -> ".join(chain), out)
    result = luigi.build(
        [StageTask(run_dir=str(out), stage=chain[-1], chain=tuple(chain))],
        local_scheduler=True,
        no_configure_logging=True,
        detailed_summary=True,
    )
    failed: list[str] = []
    for stage in chain:
        record = read_record(out, stage)
        if record is None:
            failed.append(stage)
            continue
        manifest.record(record)
        if record.status != "done":
            failed.append(stage)
    manifest.stages.sort(key=lambda r: STAGE_ORDER.index(r.name) if r.name in STAGE_ORDER else len(STAGE_ORDER))
    manifest.save(manifest_path)
    if failed or not result.scheduling_succeeded:
        first = failed[0] if failed else chain[-1]
        record = read_record(out, first)
        reason = record.error if record is not None and record.error else "did not run"
        raise StageFailure(f"stage {first} failed: {reason}", stage=first, manifest_path=str(manifest_path))
    log.info("pipeline done: %d stage(s), manifest %s", len(chain), manifest_path)
    return manifest


@dataclass
class ReplayResult:
    original: ExperimentManifest
    replayed: ExperimentManifest
    mismatches: list[dict[str, str | None]] = field(default_factory=list)

    @property
    def identical(self) -> bool:
        return not self.mismatches


def compare_outputs(expected: dict[str, str], actual: dict[str, str]) -> list[dict[str, str | None]]:
    out = []
    for key in sorted(set(expected) | set(actual)):
        if expected.get(key) != actual.get(key):
            out.append({"output": key, "expected": expected.get(key), "actual": actual.get(key)})
    return out


def replay(manifest_path: Path | str, run_dir: Path | str | None = None) -> ReplayResult:
    """Re-run the stages a manifest records, from its config and seeds, and compare every output hash."""
    src = Path(manifest_path)
    original = ExperimentManifest.load(src)
    stages = [r.name for r in original.stages if r.status == "done"]
    if not stages:
        raise ConfigError(f"{src} records no completed stages")
    target = Path(run_dir) if run_dir is not None else src.parent / "replay"
    if (target / MANIFEST_NAME).exists():
        raise ConfigError(f"{target} already holds a run; choose an empty replay directory")
    replayed = run_pipeline(original.config, target, stages=stages, command="replay", force=True)
    mismatches = compare_outputs(original.output_hashes(), replayed.output_hashes())
    for m in mismatches:
        log.warning("replay mismatch %s: %s != %s", m["output"], m["expected"], m["actual"])
    log.info("replay of %d stage(s): %d mismatch(es)", len(stages), len(mismatches))
    return ReplayResult(original=original, replayed=replayed, mismatches=mismatches)
