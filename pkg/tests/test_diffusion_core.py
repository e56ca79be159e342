import math

import pytest
import torch

from conftest import OracleEps, TwoParamEps, ZeroEps
from latent_protection.diffusion import (
    AnalyticAutoencoder,
    ConvAutoencoder,
    GraphMemoryMeter,
    build_autoencoder,
    build_linear_schedule,
    forward_noise,
    ground_truth_target,
    latent_loss,
    ldm_loss,
    reconstruction_mse,
    respaced_timesteps,
    sample,
    sdedit,
    sdedit_start_timestep,
    set_memory_mode,
    train_autoencoder,
)
from latent_protection.errors import ConfigError, ScheduleError, ShapeMismatchError, TimestepOutOfRange
from latent_protection.seeding import derive_seed, make_generator


def test_linear_schedule_matches_running_product():
    sched = build_linear_schedule(1000, 1e-4, 2e-2)
    expected = 1.0
    for i in range(1000):
        expected *= 1.0 - (1e-4 + (i / 999) * (2e-2 - 1e-4))
    assert sched.alpha_bar.dtype == torch.float64
    assert float(sched.beta[0]) == pytest.approx(1e-4)
    assert float(sched.beta[-1]) == pytest.approx(2e-2)
    assert float(sched.alpha_bar[-1]) == pytest.approx(expected, rel=1e-10)
    assert bool((sched.alpha_bar[1:] < sched.alpha_bar[:-1]).all())


@pytest.mark.parametrize("kw", [{"T": 1}, {"beta0": 0.0}, {"beta0": 0.03, "betaT": 0.02}, {"betaT": 1.0}])
def test_schedule_rejects_bad_parameters(kw):
    with pytest.raises(ScheduleError):
        build_linear_schedule(**{"T": 100, "beta0": 1e-4, "betaT": 2e-2, **kw})


def test_timestep_out_of_range(sched):
    z = torch.zeros((1, 12, 4, 4))
    with pytest.raises(TimestepOutOfRange):
        forward_noise(z, sched.T, z, sched)
    with pytest.raises(TimestepOutOfRange):
        forward_noise(z, -1, z, sched)


def test_forward_noise_moments(sched):
    n = 10000
    z0 = torch.full((n, 1, 2, 2), 0.5, dtype=torch.float64)
    eps = torch.randn(z0.shape, generator=make_generator(3), dtype=torch.float64)
    t = 20
    z_t = forward_noise(z0, t, eps, sched)
    ab = float(sched.alpha_bar[t])
    se = math.sqrt((1.0 - ab) / n)
    assert torch.all((z_t.mean(dim=0) - math.sqrt(ab) * 0.5).abs() < 4 * se)
    assert torch.allclose(z_t.var(dim=0), torch.full((1, 2, 2), 1.0 - ab, dtype=torch.float64), rtol=0.05)


def test_forward_noise_zero_noise_at_zero_eps(sched):
    z0 = torch.randn((2, 12, 4, 4), generator=make_generator(1))
    out = forward_noise(z0, 5, torch.zeros_like(z0), sched)
    assert torch.allclose(out, sched.alpha_bar[5].sqrt().float() * z0)


def test_regression_target_is_the_noise(sched):
    gen = make_generator(4)
    z0 = torch.randn((3, 12, 4, 4), generator=gen)
    eps = torch.randn(z0.shape, generator=gen)
    assert torch.equal(ground_truth_target(eps), eps)
    assert torch.count_nonzero(ground_truth_target(torch.zeros_like(eps))) == 0
    t = torch.tensor([0, 20, 49])
    loss = latent_loss(lambda z_t, tt, c: eps, z0, 0, sched, gen, t=t, eps=eps)
    assert float(loss) == 0.0


def test_analytic_autoencoder_roundtrip_is_exact():
    ae = AnalyticAutoencoder(factor=2)
    x = torch.rand((2, 3, 8, 8), generator=make_generator(0), dtype=torch.float64)
    z = ae.encode(x)
    assert z.shape == (2, 12, 4, 4)
    assert ae.latent_channels == 12
    assert torch.allclose(ae.decode(z), x, atol=1e-12)
    # The DC coefficient of a 2x2 patch is twice its mean.
    assert torch.allclose(z[:, :3], 2.0 * torch.nn.functional.avg_pool2d(x, 2), atol=1e-12)
    assert reconstruction_mse(ae, x) < 1e-20


def test_analytic_autoencoder_single_image_and_shape_errors():
    ae = AnalyticAutoencoder(factor=4)
    x = torch.rand((3, 8, 8), generator=make_generator(0))
    assert ae.encode(x).shape == (48, 2, 2)
    with pytest.raises(ShapeMismatchError):
        ae.encode(torch.rand((3, 6, 6)))
    with pytest.raises(ShapeMismatchError):
        ae.decode(torch.rand((5, 2, 2)))
    with pytest.raises(ConfigError):
        AnalyticAutoencoder(factor=3)
    with pytest.raises(ConfigError):
        build_autoencoder("vq")


def test_conv_autoencoder_trains(images):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(0)
        ae = ConvAutoencoder(factor=2, latent_channels=4, width=8)
    history = train_autoencoder(ae, images, steps=5, lr=1e-3, batch_size=2, seed=0)
    assert len(history) == 5
    assert all(math.isfinite(v) for v in history)
    assert ae.encode(images).shape == (4, 4, 4, 4)
    assert train_autoencoder(AnalyticAutoencoder(), images, steps=5) == []


def test_loss_is_zero_for_oracle_and_latent_size_for_zero_model(sched, backend):
    x = torch.rand((64, 3, 8, 8), generator=make_generator(0), dtype=torch.float64)
    z0 = backend.encode(x)
    gen = make_generator(0, "loss")
    t = torch.randint(0, sched.T, (64,), generator=gen)
    eps = torch.randn(z0.shape, generator=gen, dtype=torch.float64)
    assert float(latent_loss(OracleEps(z0, sched), z0, 0, sched, gen, t=t, eps=eps)) < 1e-18

    loss = ldm_loss(ZeroEps(), (x, torch.zeros(64, dtype=torch.long)), backend, sched, 7, mc_samples=8)
    assert float(loss) == pytest.approx(12 * 4 * 4, abs=5.0)


def test_ldm_loss_is_deterministic_and_rejects_empty(sched, backend, images):
    batch = [(images[i], 0) for i in range(images.shape[0])]
    assert float(ldm_loss(ZeroEps(), batch, backend, sched, 11)) == float(ldm_loss(ZeroEps(), batch, backend, sched, 11))
    with pytest.raises(ConfigError):
        ldm_loss(ZeroEps(), [], backend, sched, 11)


def test_loss_gradient_matches_finite_differences(sched, backend):
    model = TwoParamEps()
    x = torch.rand((3, 3, 8, 8), generator=make_generator(2), dtype=torch.float64)
    z0 = backend.encode(x)
    gen = make_generator(0)
    t = torch.tensor([3, 17, 40])
    eps = torch.randn(z0.shape, generator=gen, dtype=torch.float64)

    def loss() -> torch.Tensor:
        return latent_loss(model, z0, 0, sched, gen, t=t, eps=eps)

    (grad,) = torch.autograd.grad(loss(), model.weight)
    h = 1e-6
    for i in range(2):
        with torch.no_grad():
            model.weight[i] += h
            up = float(loss())
            model.weight[i] -= 2 * h
            down = float(loss())
            model.weight[i] += h
        fd = (up - down) / (2 * h)
        assert abs(float(grad[i]) - fd) <= 1e-4 * max(1.0, abs(fd))


def test_respaced_timesteps(sched):
    steps = respaced_timesteps(sched, 10)
    assert steps[0] == sched.T - 1 and steps[-1] == 0
    assert all(a > b for a, b in zip(steps, steps[1:]))
    assert respaced_timesteps(sched, 1000) == list(range(sched.T - 1, -1, -1))
    assert respaced_timesteps(sched, 4, start=15)[0] == 15


def test_sample_is_deterministic_and_validates_steps(unet, sched):
    a = sample(unet, sched, 5, 1, seed=3, shape=(12, 4, 4), n=2)
    b = sample(unet, sched, 5, 1, seed=3, shape=(12, 4, 4), n=2)
    assert a.shape == (2, 12, 4, 4)
    assert torch.equal(a, b)
    assert not torch.equal(a, sample(unet, sched, 5, 1, seed=4, shape=(12, 4, 4), n=2))
    with pytest.raises(ConfigError):
        sample(unet, sched, 0, 0, seed=0, shape=(12, 4, 4))
    with pytest.raises(ConfigError):
        sample(unet, sched, sched.T + 1, 0, seed=0, shape=(12, 4, 4))


def test_full_length_chain_stays_finite():
    sched = build_linear_schedule()
    z = sample(ZeroEps(), sched, 1000, 0, seed=0, shape=(4, 4, 4), dtype=torch.float64)
    assert bool(torch.isfinite(z).all())
    # A zero predictor only rescales by 1/sqrt(alpha_bar) overall, about 160x here.
    assert float(z.norm()) < 1e4


def test_sdedit_start_timestep():
    assert sdedit_start_timestep(0.3, 1000) == 300
    assert sdedit_start_timestep(0.0005, 1000) == 1
    for bad in (0.0, 1.0, -0.2):
        with pytest.raises(ConfigError):
            sdedit_start_timestep(bad, 1000)


def test_sdedit_keeps_shape_and_range(unet, backend, sched, images):
    out = sdedit(unet, backend, sched, images[:2], 0.3, [0, 1], seed=5, steps=3)
    assert out.shape == images[:2].shape
    assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0
    assert torch.equal(out, sdedit(unet, backend, sched, images[:2], 0.3, [0, 1], seed=5, steps=3))


def test_unet_condition_and_shape_checks(unet):
    z = torch.randn((2, 12, 4, 4), generator=make_generator(0))
    assert unet(z, 10, 1).shape == z.shape
    assert unet(z[0], 10, 0).shape == z[0].shape
    with pytest.raises(ConfigError):
        unet(z, 10, 2)
    with pytest.raises(ShapeMismatchError):
        unet(torch.randn((2, 4, 4, 4)), 10, 0)
    with pytest.raises(ConfigError):
        set_memory_mode(unet, "offload")


def test_recompute_mode_saves_less_for_backward(unet):
    model = unet.double()
    z = torch.randn((2, 12, 4, 4), generator=make_generator(0), dtype=torch.float64)

    def saved(mode: str) -> tuple[int, torch.Tensor]:
        set_memory_mode(model, mode)
        x = z.clone().requires_grad_(True)
        with GraphMemoryMeter() as meter:
            out = model(x, 7, 0).pow(2).sum()
        (grad,) = torch.autograd.grad(out, x)
        return meter.saved_bytes, grad

    standard_bytes, standard_grad = saved("standard")
    recompute_bytes, recompute_grad = saved("recompute")
    set_memory_mode(model, "standard")
    assert recompute_bytes < standard_bytes
    assert torch.allclose(standard_grad, recompute_grad, rtol=1e-6, atol=1e-12)


def test_derive_seed_is_stable_and_name_sensitive():
    assert derive_seed(0, "attack") == derive_seed(0, "attack")
    assert derive_seed(0, "attack") != derive_seed(0, "sample")
    assert derive_seed(0, "attack") != derive_seed(1, "attack")
