from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

ProgressCallback = Callable[[str, float, str], None]


@dataclass
class StageContext:
    config: dict[str, Any]
    run_dir: Path
    progress_callback: ProgressCallback | None = None

    @property
    def device(self) -> str:
        return str(self.config.get("run", {}).get("device", "cpu"))

    def path(self, *parts: str) -> Path:
        return self.run_dir.joinpath(*parts)

    def progress(self, phase: str, frac: float, message: str) -> None:
        if self.progress_callback is not None:
            self.progress_callback(phase, frac, message)


@dataclass
class StageResult:
    outputs: list[Path]
    inputs: dict[str, str] = field(default_factory=dict)
    details: dict[str, Any] = field(default_factory=dict)
