"""Linear beta schedule and its alpha / alpha_bar tables (float64)."""

from __future__ import annotations

from typing import Any

import torch

from latent_protection.errors import ScheduleError

from .types import NoiseSchedule

DEFAULT_T = 1000
DEFAULT_BETA0 = 1e-4
DEFAULT_BETAT = 2e-2


def build_linear_schedule(T: int = DEFAULT_T, beta0: float = DEFAULT_BETA0, betaT: float = DEFAULT_BETAT) -> NoiseSchedule:
    if int(T) < 2:
        raise ScheduleError(f"T must be >= 2, got {T}")
    if not (0.0 < beta0 < betaT < 1.0):
        raise ScheduleError(f"need 0 < beta0 < betaT < 1, got beta0={beta0}, betaT={betaT}")
    steps = torch.arange(int(T), dtype=torch.float64)
    beta = beta0 + (steps / (int(T) - 1)) * (betaT - beta0)
    alpha = 1.0 - beta
    alpha_bar = torch.cumprod(alpha, dim=0)
    return NoiseSchedule(T=int(T), beta=beta, alpha=alpha, alpha_bar=alpha_bar, beta0=float(beta0), betaT=float(betaT))


def schedule_from_metadata(meta: dict[str, Any]) -> NoiseSchedule:
    kind = str(meta.get("kind", "linear"))
    if kind != "linear":
        raise ScheduleError(f"unknown schedule kind: {kind}")
    return build_linear_schedule(int(meta["T"]), float(meta["beta0"]), float(meta["betaT"]))


def respaced_timesteps(sched: NoiseSchedule, steps: int, start: int | None = None) -> list[int]:
    """Evenly strided descending timesteps from `start` (default T-1) down to 0."""
    top = sched.T - 1 if start is None else int(start)
    count = max(1, min(int(steps), top + 1))
    if count == 1:
        return [top]
    grid = torch.linspace(float(top), 0.0, count, dtype=torch.float64).round().long().tolist()
    out: list[int] = []
    for t in grid:
        if not out or t < out[-1]:
            out.append(int(t))
    return out
