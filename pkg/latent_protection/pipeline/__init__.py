from .orchestrator import ReplayResult, compare_outputs, replay, run_pipeline
from .stages import STAGES, resolve_stage
from .tasks import StageTask
from .types import StageContext, StageResult

__all__ = [
    "ReplayResult",
    "STAGES",
    "StageContext",
    "StageResult",
    "StageTask",
    "compare_outputs",
    "replay",
    "resolve_stage",
    "run_pipeline",
]
