from .adapters import (
    LoRAConv2d,
    LoRALinear,
    adapter_parameters,
    attach_adapters,
    count_parameters,
    has_adapters,
    load_adapters,
    merge_adapters,
    save_adapters,
)
from .trainer import FinetuneConfig, Finetuner, finetune, prepare_model

__all__ = [
    "FinetuneConfig",
    "Finetuner",
    "LoRAConv2d",
    "LoRALinear",
    "adapter_parameters",
    "attach_adapters",
    "count_parameters",
    "finetune",
    "has_adapters",
    "load_adapters",
    "merge_adapters",
    "prepare_model",
    "save_adapters",
]
