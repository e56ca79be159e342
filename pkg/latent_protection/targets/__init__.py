from .patterns import (
    EncodedTarget,
    PatternSpec,
    TargetCache,
    ablation_specs,
    encode_target,
    generate_pattern,
    latent_sign_alternations,
    sign_changes,
)

__all__ = [
    "EncodedTarget",
    "PatternSpec",
    "TargetCache",
    "ablation_specs",
    "encode_target",
    "generate_pattern",
    "latent_sign_alternations",
    "sign_changes",
]
