"""
Luigi chain over the requested stages: each StageTask requires the stage before it.
Completion is a marker file under <run>/.stages/; the stage record next to it is what the
manifest is assembled from.
"""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path
from typing import Any

import luigi
import torch

from latent_protection.config import load_resolved
from latent_protection.io.manifest import StageRecord, hash_outputs, utc_now

from .stages import resolve_stage
from .types import StageContext

log = logging.getLogger("latent_protection.pipeline.tasks")

STAGE_DIR = ".stages"
CONFIG_NAME = "config.yaml"


def record_path(run_dir: Path | str, stage: str) -> Path:
    return Path(run_dir) / STAGE_DIR / f"{stage}.json"


def marker_path(run_dir: Path | str, stage: str) -> Path:
    return Path(run_dir) / STAGE_DIR / f"{stage}.done"


def read_record(run_dir: Path | str, stage: str) -> StageRecord | None:
    path = record_path(run_dir, stage)
    if not path.is_file():
        return None
    return StageRecord.from_dict(json.loads(path.read_text(encoding="utf-8")))


def _write_record(run_dir: Path, record: StageRecord) -> None:
    path = record_path(run_dir, record.name)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record.__dict__, indent=2, sort_keys=True, default=str), encoding="utf-8")


def _peak_memory() -> dict[str, Any]:
    out: dict[str, Any] = {}
    try:
        import resource

        out["max_rss_kb"] = int(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss)
    except ImportError:
        pass
    if torch.cuda.is_available():
        out["cuda_max_allocated"] = int(torch.cuda.max_memory_allocated())
    return out


class StageTask(luigi.Task):
    """Run one stage of an experiment whose resolved config sits at <run_dir>/config.yaml."""

    run_dir = luigi.Parameter()
    stage = luigi.Parameter()
    chain = luigi.ListParameter()

    def requires(self):
        position = list(self.chain).index(self.stage)
        if position == 0:
            return []
        return StageTask(run_dir=self.run_dir, stage=self.chain[position - 1], chain=self.chain)

    def output(self):
        return luigi.LocalTarget(str(marker_path(self.run_dir, self.stage)))

    def run(self):
        run_dir = Path(self.run_dir)
        cfg = load_resolved(run_dir / CONFIG_NAME)
        record = StageRecord(name=self.stage, status="running", started_at=utc_now())
        _write_record(run_dir, record)
        started = time.perf_counter()

        def progress(phase: str, frac: float, message: str) -> None:
            log.debug("[%s] %s %.0f%% %s", self.stage, phase, 100.0 * frac, message)

        log.info("stage %s: start", self.stage)
        try:
            result = resolve_stage(self.stage).run(StageContext(config=cfg, run_dir=run_dir, progress_callback=progress))
        except Exception as exc:
            record.status = "failed"
            record.error = f"{type(exc).__name__}: {exc}"
            record.seconds = time.perf_counter() - started
            _write_record(run_dir, record)
            raise
        record.status = "done"
        record.inputs = dict(result.inputs)
        record.outputs = hash_outputs(run_dir, [Path(p) for p in result.outputs])
        record.details = dict(result.details)
        record.seconds = time.perf_counter() - started
        record.peak_memory = _peak_memory()
        _write_record(run_dir, record)
        Path(self.output().path).touch()
        log.info("stage %s: %d output(s) in %.1fs", self.stage, len(record.outputs), record.seconds)
