from __future__ import annotations

from typing import Protocol

from .types import StageContext, StageResult


class Stage(Protocol):
    name: str

    def run(self, ctx: StageContext) -> StageResult: ...
