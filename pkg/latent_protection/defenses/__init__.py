from .harness import ROBUSTNESS_ZETA, robustness_run
from .purify import DEFAULT_DEFENSE_GRID, SuperResolutionRegistry, purify
from .types import DEFENSE_KINDS, PIPELINES, DefenseSpec, RobustnessReport

__all__ = [
    "DEFENSE_KINDS",
    "DefenseSpec",
    "DEFAULT_DEFENSE_GRID",
    "PIPELINES",
    "ROBUSTNESS_ZETA",
    "RobustnessReport",
    "SuperResolutionRegistry",
    "purify",
    "robustness_run",
]
