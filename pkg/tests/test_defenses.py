import pytest
import torch

from latent_protection.defenses import (
    DEFAULT_DEFENSE_GRID,
    DefenseSpec,
    SuperResolutionRegistry,
    purify,
    robustness_run,
)
from latent_protection.errors import ConfigError, DefenseUnavailable
from latent_protection.finetune import FinetuneConfig
from latent_protection.io.images import quantize
from latent_protection.seeding import make_generator


@pytest.mark.parametrize("sigma", [4.0, 8.0])
def test_gaussian_noise_std_in_pixel_units(sigma):
    x = torch.full((3, 64, 64), 0.5, dtype=torch.float64)
    out = purify(x, DefenseSpec("gaussian", sigma=sigma), seed=1)
    assert out.shape == x.shape
    assert float((out - x).std()) == pytest.approx(sigma / 255, rel=0.05)
    assert torch.equal(out, purify(x, DefenseSpec("gaussian", sigma=sigma), seed=1))
    assert not torch.equal(out, purify(x, DefenseSpec("gaussian", sigma=sigma), seed=2))


def test_zero_sigma_is_identity():
    x = torch.rand((2, 3, 8, 8), generator=make_generator(0))
    out = purify(x, DefenseSpec("gaussian", sigma=0.0))
    assert torch.equal(out, x) and out is not x


def test_jpeg_keeps_shape_and_grid():
    x = torch.rand((2, 3, 16, 16), generator=make_generator(1), dtype=torch.float64)
    low = purify(x, DefenseSpec("jpeg", quality=20))
    high = purify(x, DefenseSpec("jpeg", quality=95))
    assert low.shape == x.shape and low.dtype == x.dtype
    assert float(low.min()) >= 0.0 and float(low.max()) <= 1.0
    assert torch.allclose(low, quantize(low), atol=1e-12)
    assert float((low - x).abs().mean()) > float((high - x).abs().mean())
    assert purify(x[0], DefenseSpec("jpeg", quality=70)).shape == (3, 16, 16)


@pytest.mark.parametrize("factor", [2.0, 0.5])
def test_resize_roundtrip(factor):
    flat = torch.full((1, 3, 16, 16), 0.25)
    assert torch.allclose(purify(flat, DefenseSpec("resize", factor=factor)), flat, atol=1e-6)
    x = torch.rand((1, 3, 16, 16), generator=make_generator(2))
    out = purify(x, DefenseSpec("resize", factor=factor))
    assert out.shape == x.shape
    assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0


def test_super_resolution_registry():
    x = torch.rand((2, 3, 8, 8), generator=make_generator(3))
    with pytest.raises(DefenseUnavailable):
        purify(x, DefenseSpec("sr"))
    registry = SuperResolutionRegistry()
    with pytest.raises(DefenseUnavailable):
        purify(x, DefenseSpec("sr"), registry=registry)
    registry.register("default", lambda b: b * 2.0)
    registry.register("broken", lambda b: b[:, :, :4, :4])
    assert registry.names() == ["broken", "default"]
    assert torch.equal(purify(x, DefenseSpec("sr"), registry=registry), (x * 2.0).clamp(0, 1))
    with pytest.raises(DefenseUnavailable):
        purify(x, DefenseSpec("sr", model="broken"), registry=registry)


def test_defense_spec_parse_and_labels():
    cases = {
        "gaussian:sigma=4": "gaussian-4",
        "jpeg:quality=20": "jpeg-20",
        "resize:factor=0.5": "resize-0.5x",
        "resize:factor=2": "resize-2x",
        "sr": "sr-default",
        "sr:model=esrgan": "sr-esrgan",
    }
    for text, label in cases.items():
        spec = DefenseSpec.parse(text)
        assert spec.label == label
        assert DefenseSpec.from_dict(spec.to_dict()) == spec
    for bad in ("blur", "jpeg:quality=0", "jpeg:quality", "resize:interpolation=nearest", "gaussian:sigma=-1", "jpeg:level=3"):
        with pytest.raises(ConfigError):
            DefenseSpec.parse(bad)


def test_default_grid():
    labels = [s.label for s in DEFAULT_DEFENSE_GRID]
    assert labels == ["gaussian-4", "gaussian-8", "jpeg-20", "jpeg-70", "resize-2x", "resize-0.5x", "sr-default"]


def test_robustness_sdedit_columns(unet, backend, sched, images):
    adv = (images + 8 / 255 * torch.sign(torch.randn(images.shape, generator=make_generator(4)))).clamp(0, 1)
    specs = [DefenseSpec("gaussian", sigma=0.0), DefenseSpec("jpeg", quality=20), DefenseSpec("sr")]
    report = robustness_run(
        adv, specs, pipeline="sdedit", model=unet, backend=backend, sched=sched, seed=0,
        conds=[0, 0, 1, 1], clean=images, sdedit_steps=2,
    )
    assert list(report.columns) == ["none", "gaussian-0", "jpeg-20", "sr-default", "clean"]
    assert report.columns["gaussian-0"] == report.columns["none"]
    assert report.failed == ["sr-default"]
    assert "DefenseUnavailable" in report.columns["sr-default"]["error"]
    assert 0.0 <= report.columns["jpeg-20"]["ms_ssim"] <= 1.0
    assert report.to_dict()["pipeline"] == "sdedit"


def test_robustness_finetune_sample(unet, backend, sched, images):
    report = robustness_run(
        images, [DefenseSpec("gaussian", sigma=0.0)], pipeline="finetune+sample", model=unet, backend=backend,
        sched=sched, seed=1, conds=[0, 0, 1, 1], finetune_cfg=FinetuneConfig(steps=1, lr=1e-3, rank=2),
        sample_steps=2, samples_per_condition=1,
    )
    assert report.columns["none"]["images"] == 2
    assert report.columns["gaussian-0"] == report.columns["none"]


def test_robustness_argument_checks(unet, backend, sched, images):
    with pytest.raises(ConfigError):
        robustness_run(images, [], pipeline="img2img", model=unet, backend=backend, sched=sched, seed=0)
    with pytest.raises(ConfigError):
        robustness_run(images, [], pipeline="sdedit", model=unet, backend=backend, sched=sched, seed=0, conds=[0])
