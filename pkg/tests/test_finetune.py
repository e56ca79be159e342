import pytest
import torch

from latent_protection.errors import ConfigError, UnsupportedVersionError
from latent_protection.finetune import (
    FinetuneConfig,
    Finetuner,
    LoRAConv2d,
    LoRALinear,
    adapter_parameters,
    attach_adapters,
    count_parameters,
    finetune,
    has_adapters,
    load_adapters,
    merge_adapters,
    prepare_model,
    save_adapters,
)
from latent_protection.hashing import sha256_tensor, state_dict_hash
from latent_protection.seeding import make_generator


def _latents():
    return torch.randn((2, 12, 4, 4), generator=make_generator(0))


def test_fresh_adapters_do_not_change_outputs(unet):
    adapted = attach_adapters(unet, rank=2, seed=1)
    z = _latents()
    assert has_adapters(adapted) and not has_adapters(unet)
    assert torch.equal(adapted(z, 10, 0), unet(z, 10, 0))
    adapter_ids = {id(p) for p in adapter_parameters(adapted)}
    assert not any(p.requires_grad for p in adapted.parameters() if id(p) not in adapter_ids)
    assert 0 < count_parameters(adapter_parameters(adapted)) < count_parameters(unet)


def test_attach_rejects_bad_rank(unet):
    with pytest.raises(ConfigError):
        attach_adapters(unet, rank=0)


def test_finetune_returns_copy_and_merge_preserves_outputs(unet, backend, sched, images):
    before = state_dict_hash(unet)
    cfg = FinetuneConfig(steps=3, lr=1e-2, rank=2)
    tuned = finetune(unet, (images, torch.tensor([0, 0, 1, 1])), cfg, backend, sched, seed=0)
    assert state_dict_hash(unet) == before
    assert has_adapters(tuned)
    assert all(not p.requires_grad for p in tuned.parameters())
    z = _latents()
    assert not torch.allclose(tuned(z, 10, 0), unet(z, 10, 0))
    merged = merge_adapters(tuned)
    assert not has_adapters(merged)
    assert torch.allclose(merged(z, 10, 0), tuned(z, 10, 0), atol=1e-5)
    assert set(merged.state_dict()) == set(unet.state_dict())


def test_adapter_finetune_keeps_base_layers_and_counts_low_rank_weights(unet, backend, sched, images):
    cfg = FinetuneConfig(steps=3, lr=1e-2, rank=2)
    tuned = finetune(unet, (images, torch.tensor([0, 0, 1, 1])), cfg, backend, sched, seed=0)
    adapted = [(name, m) for name, m in tuned.named_modules() if isinstance(m, (LoRALinear, LoRAConv2d))]
    assert any(isinstance(m, LoRALinear) for _, m in adapted)
    assert any(isinstance(m, LoRAConv2d) for _, m in adapted)
    total = 0
    for name, layer in adapted:
        original = unet.get_submodule(name)
        assert sha256_tensor(layer.base.weight) == sha256_tensor(original.weight), name
        if original.bias is not None:
            assert sha256_tensor(layer.base.bias) == sha256_tensor(original.bias), name
        d_in = layer.base.weight[0].numel()
        d_out = layer.base.weight.shape[0]
        trainable = count_parameters(list(layer.down.parameters()) + list(layer.up.parameters()))
        assert trainable == cfg.rank * (d_in + d_out), name
        total += trainable
    assert total == count_parameters(adapter_parameters(tuned))
    assert any(torch.count_nonzero(layer.up.weight) > 0 for _, layer in adapted)


def test_rank_four_adapter_on_square_layer():
    layer = LoRALinear(torch.nn.Linear(16, 16), rank=4)
    assert count_parameters(list(layer.down.parameters()) + list(layer.up.parameters())) == 2 * 4 * 16
    assert not any(p.requires_grad for p in layer.base.parameters())


def test_finetune_is_deterministic(unet, backend, sched, images):
    cfg = FinetuneConfig(steps=2, lr=1e-2, rank=2)
    data = (images, torch.zeros(4, dtype=torch.long))
    a = finetune(unet, data, cfg, backend, sched, seed=4)
    b = finetune(unet, data, cfg, backend, sched, seed=4)
    assert state_dict_hash(a) == state_dict_hash(b)


def test_full_mode_trains_every_weight(unet, backend, sched, images):
    cfg = FinetuneConfig(steps=1, lr=1e-3, mode="full", optimizer="adamw")
    tuned = finetune(unet, (images, torch.zeros(4, dtype=torch.long)), cfg, backend, sched, seed=0)
    assert not has_adapters(tuned)
    assert state_dict_hash(tuned) != state_dict_hash(unet)


def test_finetuner_continues_one_optimization(unet, backend, sched, images):
    cfg = FinetuneConfig(steps=2, lr=1e-3, rank=2, optimizer="sgd-momentum")
    working = prepare_model(unet, cfg, seed=0)
    trainer = Finetuner(working, cfg, backend, sched, seed=0)
    conds = torch.zeros(4, dtype=torch.long)
    trainer.step(images, conds)
    trainer.step(images, conds, n_steps=3)
    assert trainer.steps_done == 5
    assert len(trainer.history) == 5
    assert trainer.optimizer.state


def test_finetuner_requires_adapters_in_adapter_mode(unet, backend, sched):
    with pytest.raises(ConfigError):
        Finetuner(unet, FinetuneConfig(), backend, sched, seed=0)


def test_adapter_checkpoint_roundtrip(unet, backend, sched, images, tmp_path):
    cfg = FinetuneConfig(steps=2, lr=1e-2, rank=2)
    tuned = finetune(unet, (images, torch.zeros(4, dtype=torch.long)), cfg, backend, sched, seed=0)
    path = save_adapters(tuned, tmp_path / "phi.adapters.pt", metadata={"role": "phi"})
    restored = load_adapters(unet, path, merge=True)
    z = _latents()
    assert not has_adapters(restored)
    assert torch.allclose(restored(z, 5, 1), tuned(z, 5, 1), atol=1e-5)

    torch.save({"format": "lpt-adapters", "version": 99}, tmp_path / "future.pt")
    with pytest.raises(UnsupportedVersionError):
        load_adapters(unet, tmp_path / "future.pt")
    with pytest.raises(ConfigError):
        save_adapters(unet, tmp_path / "none.pt")


@pytest.mark.parametrize(
    "raw",
    [{"steps": 0}, {"lr": 0.0}, {"mode": "prefix"}, {"optimizer": "lbfgs"}, {"rank": 0}, {"batch_size": 0}],
)
def test_finetune_config_validation(raw):
    with pytest.raises(ConfigError):
        FinetuneConfig.from_dict(raw)


def test_finetune_config_ignores_unknown_keys():
    cfg = FinetuneConfig.from_dict({"steps": 3, "warmup": 10})
    assert cfg.steps == 3
    assert cfg.to_dict()["mode"] == "adapter"
