import pytest
import torch

from latent_protection.errors import ConfigError, ShapeMismatchError
from latent_protection.targets import (
    PatternSpec,
    TargetCache,
    ablation_specs,
    encode_target,
    generate_pattern,
    latent_sign_alternations,
    sign_changes,
)


@pytest.mark.parametrize("r", [1, 2, 4, 8, 16])
def test_stripes_have_two_sign_changes_per_period(r):
    img = generate_pattern(PatternSpec("stripes", repetition=r, size=(32, 32, 3)))
    assert img.shape == (3, 32, 32)
    assert sign_changes(img[0, 5]) == 2 * r
    assert sign_changes(img[0, :, 5]) == 0


def test_contrast_sets_the_two_levels():
    img = generate_pattern(PatternSpec("checker", repetition=4, contrast=0.5, size=(16, 16, 1)), dtype=torch.float64)
    assert sorted(torch.unique(img).tolist()) == [0.25, 0.75]
    flat = generate_pattern(PatternSpec("checker", repetition=4, contrast=0.0, size=(16, 16, 1)))
    assert torch.all(flat == 0.5)


def test_phase_half_period_inverts_stripes():
    base = generate_pattern(PatternSpec("stripes", repetition=4, size=(32, 32, 3)))
    shifted = generate_pattern(PatternSpec("stripes", repetition=4, phase=0.5, size=(32, 32, 3)))
    assert torch.equal(shifted, 1.0 - base)


def test_glyph_tile_is_binary_and_channel_constant():
    img = generate_pattern(PatternSpec("glyph-tile", repetition=4, size=(32, 32, 3)))
    assert set(torch.unique(img).tolist()) == {0.0, 1.0}
    assert torch.equal(img[0], img[1]) and torch.equal(img[1], img[2])
    assert sign_changes(img[0, 3]) > 0


def test_nyquist_and_option_errors():
    with pytest.raises(ConfigError):
        PatternSpec("stripes", repetition=17, size=(32, 32, 3))
    with pytest.raises(ConfigError):
        PatternSpec("waves")
    with pytest.raises(ConfigError):
        PatternSpec("checker", contrast=1.5)
    with pytest.raises(ConfigError):
        PatternSpec.parse("checker:repetition")
    with pytest.raises(ConfigError):
        PatternSpec.parse("checker:hue=3")


def test_parse_and_dict_forms():
    spec = PatternSpec.parse("checker:density=4,contrast=0.5,size=16x16x3")
    assert spec == PatternSpec("checker", repetition=4, contrast=0.5, size=(16, 16, 3))
    assert PatternSpec.parse("glyph-tile", size=(8, 8, 3)).size == (8, 8, 3)
    assert PatternSpec.from_dict(spec.to_dict()) == spec


def test_denser_patterns_alternate_more_in_latent_space(backend):
    def alternations(r):
        img = generate_pattern(PatternSpec("checker", repetition=r, size=(32, 32, 3)), dtype=torch.float64)
        return latent_sign_alternations(backend.encode(img))

    assert alternations(8) > alternations(4) > alternations(2)


def test_encode_target_uses_cache(backend):
    spec = PatternSpec("stripes", repetition=2, size=(8, 8, 3))
    img = generate_pattern(spec)
    cache = TargetCache()
    first = encode_target(img, backend, cache=cache, spec=spec)
    second = encode_target(img.clone(), backend, cache=cache, spec=spec)
    assert second is first
    assert cache.hits == 1
    assert first.latent.shape == (12, 4, 4)
    assert first.describe()["spec"]["kind"] == "stripes"
    with pytest.raises(ShapeMismatchError):
        encode_target(torch.rand((3, 7, 7)), backend)


def test_ablation_specs_skip_above_nyquist():
    assert len(ablation_specs()) == 12
    small = ablation_specs(size=(16, 16, 3))
    assert len(small) == 9
    assert max(s.repetition for s in small) == 8
    assert {s.contrast for s in small} == {0.25, 0.5, 1.0}
