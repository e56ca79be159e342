from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from latent_protection import __version__
from latent_protection.errors import ConfigError, UnsupportedVersionError
from latent_protection.hashing import sha256_file

log = logging.getLogger("latent_protection.io.manifest")

MANIFEST_SCHEMA = 1
MANIFEST_NAME = "manifest.json"


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat().replace("+00:00", "Z")


@dataclass
class StageRecord:
    name: str
    status: str = "pending"
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    started_at: str | None = None
    seconds: float | None = None
    peak_memory: dict[str, Any] = field(default_factory=dict)
    details: dict[str, Any] = field(default_factory=dict)
    error: str | None = None

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "StageRecord":
        return cls(**{k: raw[k] for k in cls.__dataclass_fields__ if k in raw})


@dataclass
class ExperimentManifest:
    command: str
    config: dict[str, Any]
    seeds: dict[str, int]
    stages: list[StageRecord] = field(default_factory=list)
    schema_version: int = MANIFEST_SCHEMA
    code_version: str = __version__
    created_at: str = field(default_factory=utc_now)

    def stage(self, name: str) -> StageRecord | None:
        for record in self.stages:
            if record.name == name:
                return record
        return None

    def record(self, record: StageRecord) -> None:
        """Insert or replace the record for `record.name`."""
        for i, existing in enumerate(self.stages):
            if existing.name == record.name:
                self.stages[i] = record
                return
        self.stages.append(record)

    def output_hashes(self) -> dict[str, str]:
        """Every stage output as "stage/relpath" -> sha256."""
        return {f"{s.name}/{rel}": digest for s in self.stages for rel, digest in sorted(s.outputs.items())}

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "ExperimentManifest":
        version = int(raw.get("schema_version", -1))
        if version != MANIFEST_SCHEMA:
            raise UnsupportedVersionError(f"manifest schema {version} is not supported (expected {MANIFEST_SCHEMA})")
        try:
            return cls(
                command=str(raw["command"]),
                config=dict(raw["config"]),
                seeds={str(k): int(v) for k, v in raw["seeds"].items()},
                stages=[StageRecord.from_dict(s) for s in raw.get("stages", [])],
                schema_version=version,
                code_version=str(raw.get("code_version", "")),
                created_at=str(raw.get("created_at", "")),
            )
        except KeyError as exc:
            raise ConfigError(f"manifest is missing {exc}") from exc

    def save(self, path: Path | str) -> Path:
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        tmp = out.with_suffix(out.suffix + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        tmp.replace(out)
        return out

    @classmethod
    def load(cls, path: Path | str) -> "ExperimentManifest":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"manifest {p} does not exist")
        return cls.from_dict(json.loads(p.read_text(encoding="utf-8")))


def hash_outputs(root: Path | str, paths: list[Path]) -> dict[str, str]:
    """Relative path (posix) -> sha256 for each file under `root`."""
    base = Path(root)
    return {p.relative_to(base).as_posix(): sha256_file(p) for p in sorted(paths)}
