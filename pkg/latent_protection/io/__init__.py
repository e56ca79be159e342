from .arrays import decode_tensor, encode_tensor, export_array, import_array
from .checkpoints import Checkpoint, load_checkpoint, save_checkpoint
from .dataset import ToyDatasetSpec, generate_dataset, load_dataset
from .images import from_uint8, list_pngs, load_png, load_png_dir, quantize, save_png, to_uint8
from .manifest import ExperimentManifest, StageRecord, hash_outputs

__all__ = [
    "Checkpoint",
    "ExperimentManifest",
    "StageRecord",
    "ToyDatasetSpec",
    "decode_tensor",
    "encode_tensor",
    "export_array",
    "from_uint8",
    "generate_dataset",
    "hash_outputs",
    "import_array",
    "list_pngs",
    "load_checkpoint",
    "load_dataset",
    "load_png",
    "load_png_dir",
    "quantize",
    "save_checkpoint",
    "save_png",
    "to_uint8",
]
