from .engine import RESAMPLE_MODES, EngineConfig, check_budget, memory_mode, pgd_step, run_attack
from .export import export_adversarial_png, quantize_adversarial
from .objectives import draw_noise, objective_terms, objective_value_and_gradient
from .types import AdversarialExample, AttackBudget, AttackObjective, parse_budget

__all__ = [
    "AdversarialExample",
    "AttackBudget",
    "AttackObjective",
    "EngineConfig",
    "RESAMPLE_MODES",
    "check_budget",
    "draw_noise",
    "export_adversarial_png",
    "memory_mode",
    "objective_terms",
    "objective_value_and_gradient",
    "parse_budget",
    "pgd_step",
    "quantize_adversarial",
    "run_attack",
]
