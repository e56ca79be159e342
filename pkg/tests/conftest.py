import pytest
import torch
from torch import nn

from latent_protection.diffusion import AnalyticAutoencoder, ToyUNet, UNetConfig, build_linear_schedule


class OracleEps(nn.Module):
    """Returns exactly the noise that produced z_t from a known clean latent z0."""

    condition_vocab = 1

    def __init__(self, z0: torch.Tensor, sched):
        super().__init__()
        self.z0 = z0
        self.sched = sched

    def forward(self, z_t, t, cond=0):
        ab = self.sched.gather(self.sched.alpha_bar, t if isinstance(t, torch.Tensor) else int(t), z_t)
        return (z_t - ab.sqrt() * self.z0) / (1.0 - ab).sqrt()


class ZeroEps(nn.Module):
    condition_vocab = 1

    def forward(self, z_t, t, cond=0):
        return torch.zeros_like(z_t)


class TwoParamEps(nn.Module):
    """Two-weight nonlinear noise predictor for finite-difference checks."""

    condition_vocab = 2

    def __init__(self):
        super().__init__()
        self.weight = nn.Parameter(torch.tensor([0.7, -0.3], dtype=torch.float64))

    def forward(self, z_t, t, cond=0):
        tt = torch.as_tensor(t, dtype=z_t.dtype, device=z_t.device).reshape(-1, *([1] * (z_t.dim() - 1))) / 50.0
        return self.weight[0] * torch.tanh(z_t) + self.weight[1] * z_t * (1.0 + tt)


@pytest.fixture
def sched():
    return build_linear_schedule(50, 1e-4, 2e-2)


@pytest.fixture
def backend():
    return AnalyticAutoencoder(factor=2, image_channels=3)


@pytest.fixture
def unet():
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(0)
        model = ToyUNet(UNetConfig(latent_channels=12, base_channels=8, condition_vocab=2))
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@pytest.fixture
def images():
    gen = torch.Generator().manual_seed(0)
    return torch.rand((4, 3, 8, 8), generator=gen)


def tiny_config(out_dir, *, stages=None):
    """Resolved config for a seconds-long run on 16x16 images."""
    from latent_protection.config import load_config

    overrides = {
        "run.out_dir": str(out_dir),
        "dataset.groups": 2,
        "dataset.per_group": 2,
        "dataset.holdout_per_group": 1,
        "dataset.size": 16,
        "schedule.T": 50,
        "backbone.base_channels": 8,
        "backbone.steps": 2,
        "backbone.batch_size": 4,
        "pattern": "glyph-tile:repetition=4,contrast=1.0",
        "attack.epochs": 1,
        "attack.iters_per_epoch": 2,
        "attack.finetune_steps": 1,
        "attack.mc_samples": 1,
        "attack.step": 1 / 255,
        "finetune.steps": 1,
        "sample.steps": 2,
        "sample.per_condition": 1,
        "sdedit.steps": 2,
        "analysis.timesteps": [10, 30],
        "analysis.mc": 2,
        "defense.images_per_group": 1,
    }
    if stages is not None:
        overrides["run.stages"] = list(stages)
    return load_config(None, overrides)
