import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from conftest import OracleEps
from latent_protection.analysis import (
    BiasField,
    accumulate_sampling_error,
    analyze_run,
    bootstrap_mean_interval,
    cosine,
    cosine_protocol,
    estimate_eps_adv,
    estimate_reverse_bias,
    estimate_sampling_bias,
    heatmap_grid,
    normalize_field,
    pairwise_consistency,
    render_heatmap,
)
from latent_protection.diffusion import build_linear_schedule
from latent_protection.errors import ConfigError, TimestepOutOfRange
from latent_protection.seeding import make_generator


def _field(data, kind="eps_adv", t=1):
    return BiasField(data=torch.as_tensor(data, dtype=torch.float64), timestep=t, mc_samples=1, kind=kind)


def test_eps_adv_vanishes_for_identical_inputs(unet, backend, sched, images):
    f = estimate_eps_adv(unet, images[0], images[0].clone(), 20, 4, backend, sched, seed=0)
    assert f.kind == "eps_adv" and f.shape == (12, 4, 4)
    assert torch.count_nonzero(f.data) == 0
    g = estimate_eps_adv(unet, images[0], (images[0] + 4 / 255).clamp(0, 1), 20, 4, backend, sched, seed=0)
    assert g.norm() > 0


def test_sampling_bias_of_oracle_is_zero(backend, sched):
    x = torch.rand((3, 8, 8), generator=make_generator(5), dtype=torch.float64)
    oracle = OracleEps(backend.encode(x).unsqueeze(0), sched)
    for t in (0, 25, 49):
        f = estimate_sampling_bias(oracle, x, t, 16, backend, sched, seed=1)
        assert float(f.data.abs().max()) < 1e-9


def test_reverse_bias_is_zero_without_finetuning(unet, backend, sched, images):
    f = estimate_reverse_bias(unet, unet, unet, images[0], images[1], 10, 3, backend, sched, seed=2)
    assert f.kind == "reverse_bias"
    assert torch.count_nonzero(f.data) == 0


def test_estimators_validate_arguments(unet, backend, sched, images):
    with pytest.raises(TimestepOutOfRange):
        estimate_eps_adv(unet, images[0], images[1], sched.T, 2, backend, sched, seed=0)
    with pytest.raises(ConfigError):
        estimate_sampling_bias(unet, images[0], 5, 0, backend, sched, seed=0)


def test_estimates_are_seed_deterministic(unet, backend, sched, images):
    a = estimate_sampling_bias(unet, images[2], 30, 3, backend, sched, seed=7)
    b = estimate_sampling_bias(unet, images[2], 30, 3, backend, sched, seed=7)
    c = estimate_sampling_bias(unet, images[2], 30, 3, backend, sched, seed=8)
    assert torch.equal(a.data, b.data)
    assert not torch.equal(a.data, c.data)


def test_accumulate_sampling_error_weights_by_beta(sched):
    one = _field(torch.ones((2, 3, 3)), kind="sampling_bias")
    single = accumulate_sampling_error({7: one}, sched)
    assert single.kind == "sampling_error" and single.timestep is None
    assert torch.allclose(single.data, float(sched.beta[7]) * torch.ones((2, 3, 3), dtype=torch.float64))

    many = accumulate_sampling_error({3: one, 10: one, 40: one}, sched)
    expected = float(sched.beta[3] + sched.beta[10] + sched.beta[40])
    assert torch.allclose(many.data, torch.full((2, 3, 3), expected, dtype=torch.float64))
    assert many.sources["timesteps"] == "3,10,40"
    with pytest.raises(ConfigError):
        accumulate_sampling_error({}, sched)


def test_bias_field_rejects_non_finite_and_unknown_kind():
    with pytest.raises(ConfigError):
        _field([1.0, math.nan])
    with pytest.raises(ConfigError):
        _field([1.0], kind="gradient")


def test_cosine_cases():
    v = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
    assert cosine(v, 2 * v) == pytest.approx(1.0)
    assert cosine(v, -v) == pytest.approx(-1.0)
    assert cosine(v, torch.tensor([2.0, 1.0, 0.0], dtype=torch.float64)) == pytest.approx(0.0, abs=1e-12)
    assert math.isnan(cosine(v, torch.zeros(3)))


def test_cosine_protocol_excludes_undefined_pairs():
    v = torch.tensor([1.0, 0.0, 0.0])
    report = cosine_protocol([_field(v), _field(-v)], [_field(v), _field(torch.zeros(3))], labels_a=["a", "b"])
    assert report.undefined == 2
    assert report.defined == 2
    assert report.mean == pytest.approx(0.0)
    as_dict = report.to_dict()
    assert as_dict["matrix"][0][1] is None
    assert as_dict["labels_a"] == ["a", "b"]

    all_zero = cosine_protocol([torch.zeros(3)], [torch.zeros(3)])
    assert math.isnan(all_zero.mean)
    assert all_zero.to_dict()["mean"] is None


def test_pairwise_consistency_skips_self_pairs():
    fields = [torch.tensor([1.0, 0.0]), torch.tensor([1.0, 1.0]), torch.tensor([0.0, 1.0])]
    report = pairwise_consistency(fields)
    assert report.defined == 6
    expected = (2 * math.sqrt(0.5) + 0.0 + 2 * math.sqrt(0.5) + 0.0) / 6
    assert report.mean == pytest.approx(expected)


def test_bootstrap_interval():
    mean, low, high = bootstrap_mean_interval([1.0, 2.0, 3.0, 4.0, 5.0, math.nan], seed=3)
    assert mean == pytest.approx(3.0)
    assert 1.0 <= low <= mean <= high <= 5.0
    assert bootstrap_mean_interval([1.0, 2.0, 3.0, 4.0, 5.0], seed=3) == (mean, low, high)
    assert bootstrap_mean_interval([2.0, 2.0], seed=0) == (2.0, 2.0, 2.0)
    with pytest.raises(ConfigError):
        bootstrap_mean_interval([math.nan])


def test_heatmaps(tmp_path):
    data = torch.arange(48, dtype=torch.float64).reshape(3, 4, 4)
    norm = normalize_field(data)
    assert float(norm.min()) == 0.0 and float(norm.max()) == 1.0
    assert torch.all(normalize_field(torch.full((2, 2), 3.0)) == 0.5)

    grid = heatmap_grid(_field(data))
    assert grid.shape == (4, 3 * 4 + 2)
    assert np.all(grid[:, 4] == 0.5)

    path = render_heatmap(data, tmp_path / "maps" / "field.png", scale=4)
    with Image.open(path) as img:
        assert img.size == (14 * 4, 4 * 4)
        assert img.mode == "RGB"


def test_analyze_run_summary(unet, backend, sched, images):
    clean = images[:2]
    adv = (clean + 4 / 255).clamp(0, 1)
    bundle = analyze_run(
        unet, unet, clean, adv, images[2:],
        backend=backend, sched=sched, seed=0, timesteps=(5, 100), mc=2,
        theta_star=unet, conds=[0, 1], holdout_conds=[1, 0],
    )
    assert bundle.timesteps == [5, sched.T - 1]
    assert len(bundle.eps_adv[5]) == 2 and len(bundle.sampling_bias[5]) == 2
    assert len(bundle.sampling_error) == 2
    summary = bundle.summary
    for key in ("timesteps", "mc", "images", "holdout", "eps_adv_vs_sampling_bias", "eps_adv_consistency", "sampling_error_norm"):
        assert key in summary
    assert -1.0 <= summary["eps_adv_consistency"] <= 1.0
    # phi and theta* coincide, so the baseline is the same estimate and every reverse-bias field is zero.
    assert summary["baseline_sampling_error_norm"] == pytest.approx(summary["sampling_error_norm"])
    assert "reverse_bias_vs_eps_adv" not in summary
    assert "eps_adv_vs_sampling_bias@5" in bundle.reports

    with pytest.raises(ConfigError):
        analyze_run(unet, unet, clean, adv[:1], images[2:], backend=backend, sched=sched, seed=0, timesteps=(5,), mc=1)


class LinearEps(torch.nn.Module):
    condition_vocab = 1

    def __init__(self):
        super().__init__()
        self.proj = torch.nn.Conv2d(12, 12, 1, bias=False).double()
        with torch.no_grad():
            self.proj.weight.copy_(torch.randn((12, 12, 1, 1), generator=make_generator(0), dtype=torch.float64))

    def forward(self, z_t, t, cond=0):
        return self.proj(z_t)


def test_eps_adv_of_linear_model_is_closed_form(backend, sched):
    model = LinearEps()
    x = torch.rand((3, 8, 8), generator=make_generator(1), dtype=torch.float64)
    x_adv = (x + 4 / 255).clamp(0, 1)
    t = 30
    f = estimate_eps_adv(model, x, x_adv, t, 5, backend, sched, seed=0)
    shift = float(sched.alpha_bar[t]) ** 0.5 * (backend.encode(x_adv) - backend.encode(x))
    expected = model(shift.unsqueeze(0), t)[0]
    assert torch.allclose(f.data, expected, atol=1e-12)


def test_estimator_variance_follows_inverse_mc(unet, backend, sched, images):
    def spread(mc):
        draws = torch.stack([estimate_sampling_bias(unet, images[0], 25, mc, backend, sched, seed=s).data for s in range(30)])
        return float(draws.double().var(dim=0).mean())

    v4, v16, v64 = spread(4), spread(16), spread(64)
    assert 4 * 0.7 <= v4 / v16 <= 4 * 1.3
    assert 4 * 0.7 <= v16 / v64 <= 4 * 1.3


@settings(max_examples=40, deadline=None)
@given(values=st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=2, max_size=32))
def test_normalize_preserves_order(values):
    data = torch.tensor(values, dtype=torch.float64)
    norm = normalize_field(data)
    assert float(norm.min()) >= 0.0 and float(norm.max()) <= 1.0
    for i in range(len(values) - 1):
        if values[i] < values[i + 1]:
            assert norm[i] <= norm[i + 1]
        elif values[i] > values[i + 1]:
            assert norm[i] >= norm[i + 1]


@settings(max_examples=30, deadline=None)
@given(
    seed=st.integers(0, 2**16),
    a=st.floats(-4, 4, allow_nan=False),
    b=st.floats(-4, 4, allow_nan=False),
    timesteps=st.lists(st.integers(0, 49), min_size=1, max_size=5, unique=True),
)
def test_accumulation_is_linear(seed, a, b, timesteps):
    sched = build_linear_schedule(50, 1e-4, 2e-2)
    gen = make_generator(seed)
    f = {t: torch.randn((2, 3, 3), generator=gen, dtype=torch.float64) for t in timesteps}
    g = {t: torch.randn((2, 3, 3), generator=gen, dtype=torch.float64) for t in timesteps}

    def acc(fields):
        return accumulate_sampling_error({t: _field(v, kind="sampling_bias", t=t) for t, v in fields.items()}, sched).data

    mixed = acc({t: a * f[t] + b * g[t] for t in timesteps})
    assert torch.allclose(mixed, a * acc(f) + b * acc(g), atol=1e-10)
