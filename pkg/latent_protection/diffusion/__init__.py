from .autoencoder import (
    AnalyticAutoencoder,
    AutoencoderBackend,
    ConvAutoencoder,
    autoencoder_from_info,
    build_autoencoder,
    decode,
    encode,
    reconstruction_mse,
    train_autoencoder,
)
from .memory import GraphMemoryMeter
from .process import (
    forward_noise,
    ground_truth_target,
    latent_loss,
    ldm_loss,
    reverse_chain,
    sample,
    sdedit,
    sdedit_start_timestep,
)
from .protocols import EpsilonModel
from .schedule import build_linear_schedule, respaced_timesteps, schedule_from_metadata
from .training import pretrain_backbone
from .types import AutoencoderInfo, NoiseSchedule
from .unet import ToyUNet, UNetConfig, set_memory_mode

__all__ = [
    "AnalyticAutoencoder",
    "AutoencoderBackend",
    "AutoencoderInfo",
    "ConvAutoencoder",
    "EpsilonModel",
    "GraphMemoryMeter",
    "NoiseSchedule",
    "ToyUNet",
    "UNetConfig",
    "autoencoder_from_info",
    "build_autoencoder",
    "build_linear_schedule",
    "decode",
    "encode",
    "forward_noise",
    "ground_truth_target",
    "latent_loss",
    "ldm_loss",
    "pretrain_backbone",
    "reconstruction_mse",
    "respaced_timesteps",
    "reverse_chain",
    "sample",
    "schedule_from_metadata",
    "sdedit",
    "sdedit_start_timestep",
    "set_memory_mode",
    "train_autoencoder",
]
