import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from conftest import TwoParamEps
from latent_protection.attack import (
    AdversarialExample,
    AttackBudget,
    AttackObjective,
    EngineConfig,
    check_budget,
    draw_noise,
    export_adversarial_png,
    objective_terms,
    objective_value_and_gradient,
    parse_budget,
    pgd_step,
    quantize_adversarial,
    run_attack,
)
from latent_protection.attack.export import integer_radius
from latent_protection.attack.types import OBJECTIVE_KINDS
from latent_protection.diffusion import AnalyticAutoencoder, ToyUNet, UNetConfig, build_linear_schedule
from latent_protection.errors import BudgetViolation, ConfigError, MissingTargetError
from latent_protection.finetune import FinetuneConfig
from latent_protection.hashing import state_dict_hash
from latent_protection.io.images import load_png, to_uint8
from latent_protection.seeding import make_generator
from latent_protection.targets import PatternSpec, encode_target, generate_pattern


def _target(backend, size=8):
    img = generate_pattern(PatternSpec("checker", repetition=2, size=(size, size, 3)), dtype=torch.float64)
    return encode_target(img, backend).latent


def test_parse_budget():
    assert parse_budget("4/255") == pytest.approx(4 / 255)
    assert parse_budget(" 8 / 255 ") == pytest.approx(8 / 255)
    assert parse_budget("0.01") == 0.01
    assert parse_budget(0.02) == 0.02
    for bad in ("abc", "1/0"):
        with pytest.raises(ConfigError):
            parse_budget(bad)


@pytest.mark.parametrize(
    "kw", [{"step": 0.1, "zeta": 0.05}, {"step": 0.0}, {"zeta": 1.5, "step": 0.1}, {"epochs": 0}, {"finetune_steps": -1}]
)
def test_budget_validation(kw):
    with pytest.raises(ConfigError):
        AttackBudget(**kw)


def test_budget_totals_and_dict():
    b = AttackBudget.from_dict({"zeta": "8/255", "step": "1/255", "iters_per_epoch": 3, "epochs": 2, "finetune_steps": 5})
    assert b.zeta == pytest.approx(8 / 255)
    assert b.total_pgd_steps == 6 and b.total_finetune_steps == 10
    assert AttackBudget.from_dict(b.to_dict()) == b


def test_objective_defaults_and_aliases():
    assert AttackObjective("advdm").direction == "ascend"
    assert not AttackObjective("advdm").targeted
    plus = AttackObjective("ace+")
    assert plus.kind == "ace-plus" and plus.direction == "descend" and plus.targeted
    assert AttackObjective("encoder").kind == "encoder-target"
    assert "fusion_weight" in plus.describe()
    assert "fusion_weight" not in AttackObjective("ace").describe()
    for kw in ({"kind": "glaze"}, {"kind": "ace", "direction": "sideways"}, {"kind": "ace", "mc_samples": 0}):
        with pytest.raises(ConfigError):
            AttackObjective(**kw)


def test_targeted_objective_without_target(unet, backend, sched, images):
    with pytest.raises(MissingTargetError):
        objective_terms(AttackObjective("ace"), unet, backend, sched, images, make_generator(0))


@pytest.mark.parametrize("kind", ["advdm", "ace", "ace-plus", "encoder-target"])
def test_objective_gradient_matches_finite_differences(kind, sched, backend):
    model = TwoParamEps()
    x = torch.rand((2, 3, 8, 8), generator=make_generator(1), dtype=torch.float64) * 0.8 + 0.1
    gen = make_generator(2)
    t = torch.tensor([7, 33])
    eps = torch.randn((2, 12, 4, 4), generator=gen, dtype=torch.float64)
    obj = AttackObjective(kind, target=_target(backend), fusion_weight=0.5)

    def value(xx: torch.Tensor) -> float:
        return float(objective_terms(obj, model, backend, sched, xx, gen, conds=[0, 1], t=t, eps=eps).sum())

    _, grad = objective_value_and_gradient(obj, model, backend, sched, x, gen, conds=[0, 1], t=t, eps=eps)
    assert grad.shape == x.shape
    h = 1e-6
    for idx in [(0, 0, 0, 0), (0, 1, 3, 5), (1, 2, 7, 2), (1, 0, 4, 4)]:
        up, down = x.clone(), x.clone()
        up[idx] += h
        down[idx] -= h
        fd = (value(up) - value(down)) / (2 * h)
        assert abs(float(grad[idx]) - fd) <= 1e-4 * max(1.0, abs(fd))


def test_ace_plus_adds_weighted_encoder_term(unet, backend, sched, images):
    target = _target(backend)
    gen = make_generator(0)
    t = torch.tensor([5, 10, 20, 40])
    eps = torch.randn((4, 12, 4, 4), generator=gen)
    terms = {
        kind: objective_terms(AttackObjective(kind, target=target, fusion_weight=3.0), unet, backend, sched, images, gen, t=t, eps=eps)
        for kind in ("ace", "ace-plus", "encoder-target")
    }
    assert torch.allclose(terms["ace-plus"], terms["ace"] + 3.0 * terms["encoder-target"], rtol=1e-5)


def test_ace_plus_without_encoder_weight_is_ace(unet, backend, sched, images):
    target = _target(backend)
    ace = AttackObjective("ace", target=target)
    plus = AttackObjective("ace-plus", target=target, fusion_weight=0.0)
    ace_value, ace_grad = objective_value_and_gradient(ace, unet, backend, sched, images, make_generator(1))
    plus_value, plus_grad = objective_value_and_gradient(plus, unet, backend, sched, images, make_generator(1))
    assert plus_value == ace_value
    assert torch.equal(plus_grad, ace_grad)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**16), levels=st.integers(1, 16), direction=st.sampled_from(["ascend", "descend"]))
def test_pgd_step_stays_in_budget_and_box(seed, levels, direction):
    gen = make_generator(seed)
    zeta = levels / 255
    budget = AttackBudget(zeta=zeta, step=zeta / 2)
    clean = torch.rand((2, 3, 8, 8), generator=gen, dtype=torch.float64)
    x_adv = clean.clone()
    for _ in range(4):
        grad = torch.randn(clean.shape, generator=gen, dtype=torch.float64)
        x_adv = pgd_step(x_adv, grad, budget, clean, direction)
        check_budget(x_adv, clean, zeta)
        # A zero gradient has sign 0: the iterate must not move.
        assert torch.equal(pgd_step(x_adv, torch.zeros_like(grad), budget, clean, direction), x_adv)
    assert torch.equal(pgd_step(clean, torch.zeros_like(clean), budget, clean, direction), clean)


def test_check_budget_flags_violations():
    clean = torch.full((3, 4, 4), 0.5)
    with pytest.raises(BudgetViolation):
        check_budget(clean + 0.1, clean, 0.05)
    with pytest.raises(BudgetViolation):
        check_budget(torch.full((3, 4, 4), 1.02), torch.full((3, 4, 4), 1.0), 0.05)
    check_budget(clean + 0.05, clean, 0.05)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16), levels=st.integers(1, 16))
def test_quantized_pair_respects_integer_budget(seed, levels):
    gen = make_generator(seed)
    zeta = levels / 255
    clean = torch.rand((3, 6, 6), generator=gen, dtype=torch.float64)
    noise = (torch.rand(clean.shape, generator=gen, dtype=torch.float64) * 2 - 1) * zeta
    adv = (clean + noise).clamp(0, 1)
    clean_q, adv_q = quantize_adversarial(AdversarialExample(x_clean=clean, x_adv=adv, zeta=zeta))
    assert clean_q.dtype == np.uint8 and adv_q.shape == (6, 6, 3)
    assert int(np.abs(adv_q.astype(int) - clean_q.astype(int)).max()) <= integer_radius(zeta) == levels


def test_export_png_rechecks_budget(tmp_path):
    clean = torch.full((3, 4, 4), 0.5)
    adv = clean + 4 / 255
    path = export_adversarial_png(AdversarialExample(x_clean=clean, x_adv=adv, zeta=4 / 255), tmp_path / "adv" / "0.png")
    reread = to_uint8(load_png(path)).astype(int)
    assert int(np.abs(reread - to_uint8(clean).astype(int)).max()) <= 4


def test_run_attack_counts_traces_and_leaves_model_alone(unet, backend, sched, images):
    before = state_dict_hash(unet)
    budget = AttackBudget(zeta=8 / 255, step=2 / 255, iters_per_epoch=2, epochs=2, finetune_steps=1)
    obj = AttackObjective("ace", target=_target(backend), mc_samples=1)
    seen = []

    def on_step(epoch, k, x_adv, clean):
        check_budget(x_adv, clean, budget.zeta)
        seen.append((epoch, k))

    examples = run_attack(
        images, unet, obj, budget, backend, sched, seed=3,
        conds=[0, 0, 1, 1], finetune_cfg=FinetuneConfig(steps=1, lr=1e-3, rank=2), step_callback=on_step,
    )
    assert state_dict_hash(unet) == before
    assert seen == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert [e.condition_id for e in examples] == [0, 0, 1, 1]
    for ex in examples:
        assert ex.pgd_steps == 4 and ex.finetune_steps == 2
        assert len(ex.trace) == 4
        assert ex.budget_used <= budget.zeta + 1e-6
        assert ex.summary()["kind"] == "ace"

    again = run_attack(
        images, unet, obj, budget, backend, sched, seed=3,
        conds=[0, 0, 1, 1], finetune_cfg=FinetuneConfig(steps=1, lr=1e-3, rank=2),
    )
    assert [e.content_hash for e in again] == [e.content_hash for e in examples]


def test_encoder_target_pgd_reduces_latent_distance(unet, backend, sched, images):
    budget = AttackBudget(zeta=16 / 255, step=1 / 255, iters_per_epoch=3, epochs=1, finetune_steps=0)
    obj = AttackObjective("encoder-target", target=_target(backend))
    examples = run_attack(images, unet, obj, budget, backend, sched, seed=0)
    for ex in examples:
        assert ex.finetune_steps == 0
        assert ex.trace[-1] < ex.trace[0]


def test_validation_trace_and_engine_config(unet, backend, sched, images):
    budget = AttackBudget(zeta=4 / 255, step=1 / 255, iters_per_epoch=2, epochs=1, finetune_steps=0)
    obj = AttackObjective("advdm", mc_samples=1)
    gen = make_generator(9)
    draws = (torch.tensor([3, 10, 20, 45]), torch.randn((4, 12, 4, 4), generator=gen))
    examples = run_attack(
        images, unet, obj, budget, backend, sched, seed=1,
        engine=EngineConfig(memory_mode="recompute"), validation_draws=draws,
    )
    assert all(len(ex.validation_trace) == 2 for ex in examples)
    with pytest.raises(ConfigError):
        EngineConfig(memory_mode="offload")
    with pytest.raises(ConfigError):
        run_attack(images[:0], unet, obj, budget, backend, sched, seed=1)


@pytest.mark.parametrize("resample", ["step", "epoch"])
def test_plain_pgd_matches_hand_written_loop(unet, backend, sched, images, resample):
    budget = AttackBudget(zeta=4 / 255, step=1 / 255, iters_per_epoch=3, epochs=2, finetune_steps=0)
    obj = AttackObjective("ace", target=_target(backend), mc_samples=2)
    conds = torch.tensor([0, 0, 1, 1])
    examples = run_attack(images, unet, obj, budget, backend, sched, seed=5, conds=conds, engine=EngineConfig(resample=resample))

    gen = make_generator(5, "objective")
    z_ref = backend.encode(images)
    x = images.clone()
    for _ in range(budget.epochs):
        draws = draw_noise(obj, sched, z_ref, gen) if resample == "epoch" else None
        for _ in range(budget.iters_per_epoch):
            _, grad = objective_value_and_gradient(obj, unet, backend, sched, x, gen, conds=conds, draws=draws)
            x = x - budget.step * grad.sign()
            x = torch.max(torch.min(x, images + budget.zeta), images - budget.zeta).clamp(0.0, 1.0)
    assert torch.equal(torch.stack([ex.x_adv for ex in examples]), x)


def test_step_counters_over_five_epochs(unet, backend, sched, images):
    budget = AttackBudget(zeta=4 / 255, step=1 / 255, iters_per_epoch=10, epochs=5, finetune_steps=10)
    obj = AttackObjective("ace", target=_target(backend), mc_samples=1)
    examples = run_attack(
        images[:2], unet, obj, budget, backend, sched, seed=0,
        conds=[0, 1], finetune_cfg=FinetuneConfig(steps=10, lr=1e-3, rank=2),
    )
    for ex in examples:
        assert ex.pgd_steps == 50
        assert ex.finetune_steps == 50
        assert len(ex.trace) == 50


def test_frozen_draws_need_at_least_one_pair(unet, backend, sched, images):
    obj = AttackObjective("ace", target=_target(backend), mc_samples=3)
    draws = draw_noise(obj, sched, backend.encode(images), make_generator(0))
    assert len(draws) == 3
    assert draws[0][1].shape == (4, 12, 4, 4)
    assert draw_noise(AttackObjective("encoder-target", target=_target(backend)), sched, backend.encode(images), make_generator(0)) == []
    with pytest.raises(ConfigError):
        objective_terms(obj, unet, backend, sched, images, make_generator(0), draws=[])
    with pytest.raises(ConfigError):
        EngineConfig(resample="never")


@settings(max_examples=20, deadline=None)
@given(
    kind=st.sampled_from(OBJECTIVE_KINDS),
    levels=st.integers(1, 16),
    step_fraction=st.floats(0.1, 1.0),
    seed=st.integers(0, 2**16),
    finetune_steps=st.integers(0, 1),
    resample=st.sampled_from(["step", "epoch"]),
)
def test_every_attack_iterate_stays_in_budget(kind, levels, step_fraction, seed, finetune_steps, resample):
    sched = build_linear_schedule(50, 1e-4, 2e-2)
    backend = AnalyticAutoencoder(factor=2, image_channels=3)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(0)
        model = ToyUNet(UNetConfig(latent_channels=12, base_channels=8, condition_vocab=2))
    images = torch.rand((2, 3, 8, 8), generator=make_generator(seed))
    zeta = levels / 255
    budget = AttackBudget(zeta=zeta, step=zeta * step_fraction, iters_per_epoch=2, epochs=2, finetune_steps=finetune_steps)
    obj = AttackObjective(
        kind, target=None if kind == "advdm" else _target(backend), mc_samples=1, diffusion_start=20, diffusion_steps=2,
    )
    seen = []

    def on_step(epoch, k, x_adv, clean):
        check_budget(x_adv, clean, zeta)
        seen.append((epoch, k))

    examples = run_attack(
        images, model, obj, budget, backend, sched, seed=seed, conds=[0, 1],
        finetune_cfg=FinetuneConfig(steps=1, lr=1e-3, rank=2) if finetune_steps else None,
        engine=EngineConfig(resample=resample), step_callback=on_step,
    )
    assert len(seen) == 4
    for ex in examples:
        check_budget(ex.x_adv, ex.x_clean, zeta)


class _ShrunkLatentEps(nn.Module):
    """Scales its input by 0.05, so a bright target dominates the sign of every ACE gradient pixel."""

    condition_vocab = 2

    def forward(self, z_t, t, cond=0):
        return 0.05 * z_t


@pytest.mark.parametrize("resample", ["step", "epoch"])
def test_ace_validation_objective_descends(backend, sched, resample):
    images = torch.rand((4, 3, 8, 8), generator=make_generator(2), dtype=torch.float64)
    target = backend.encode(torch.full((1, 3, 8, 8), 0.8, dtype=torch.float64))
    obj = AttackObjective("ace", target=target)
    budget = AttackBudget(zeta=4 / 255, step=1 / 255, iters_per_epoch=10, epochs=2, finetune_steps=0)
    gen = make_generator(8)
    draws = (torch.randint(0, sched.T, (4,), generator=gen), torch.randn((4, 12, 4, 4), generator=gen, dtype=torch.float64).clamp(-3.0, 3.0))
    examples = run_attack(
        images, _ShrunkLatentEps(), obj, budget, backend, sched, seed=2,
        engine=EngineConfig(resample=resample), validation_draws=draws,
    )
    for ex in examples:
        trace = ex.validation_trace
        assert len(trace) == 20
        steps = list(zip(trace, trace[1:]))
        assert sum(after <= before for before, after in steps) / len(steps) >= 0.8
        assert trace[-1] < trace[0]
