import pytest
import torch

from anchorlab.adapters import export, regress
from anchorlab.domain import DomainKind
from anchorlab.errors import ContractError, DomainError, RegistryError, SpecError, UnsupportedSpecError
from anchorlab.prior import sample_latent
from anchorlab.translation import (
    MixSpec, distance_matrix, multimodal_sample, progressive_translate, reconstruct, retrieval_diagnostic,
    sample_multidomain, semantic_distance, translate,
)

from conftest import EDGE, RGB, SEG, tiny_adapter, tiny_prior

MASK = DomainKind.categorical(2)


def _x(kind, n=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    if kind.is_categorical:
        return torch.randint(0, kind.channels, (n, 16, 16), generator=g)
    return torch.rand(n, kind.channels, 16, 16, generator=g) * 2 - 1


@pytest.fixture
def adapters(prior):
    return {
        "rgb": tiny_adapter("rgb", RGB, prior, seed=1).eval(),
        "seg": tiny_adapter("seg", SEG, prior, seed=2).eval(),
        "edge": tiny_adapter("edge", EDGE, prior, seed=3).eval(),
    }


def test_same_domain_equals_reconstruct(prior, adapters):
    x = _x(RGB)
    assert torch.equal(translate(x, adapters["rgb"], adapters["rgb"], prior), reconstruct(x, adapters["rgb"], prior))


@pytest.mark.parametrize("src,dst", [("rgb", "seg"), ("seg", "edge"), ("edge", "rgb")])
def test_translate_output_kind(prior, adapters, src, dst):
    a, b = adapters[src], adapters[dst]
    y = translate(_x(a.kind), a, b, prior)
    if b.kind.is_categorical:
        assert y.shape == (3, 16, 16) and y.dtype == torch.long
        assert y.min() >= 0 and y.max() < b.kind.channels
    else:
        assert y.shape == (3, b.kind.channels, 16, 16) and y.abs().max() <= 1


def test_translate_deterministic(prior, adapters):
    x = _x(SEG)
    assert torch.equal(translate(x, adapters["seg"], adapters["rgb"], prior),
                       translate(x, adapters["seg"], adapters["rgb"], prior))


def test_translate_rejects_foreign_adapter(prior, adapters):
    other = tiny_prior(seed=5)
    stranger = tiny_adapter("seg", SEG, other)
    with pytest.raises(RegistryError):
        translate(_x(RGB), adapters["rgb"], stranger, prior)


def test_translate_kind_mismatch(prior, adapters):
    with pytest.raises(DomainError):
        translate(_x(SEG), adapters["rgb"], adapters["edge"], prior)


def test_untrained_reconstruct_is_well_formed(prior, adapters):
    y = reconstruct(_x(SEG), adapters["seg"], prior)
    assert y.shape == (3, 16, 16)


def test_sample_multidomain(prior, adapters):
    doms = [adapters["rgb"], adapters["seg"]]
    a = sample_multidomain(prior, doms, seed=4, n=2)
    b = sample_multidomain(prior, doms, seed=4, n=2)
    assert torch.equal(a.native_rgb, b.native_rgb)
    for d in ("rgb", "seg"):
        assert torch.equal(a.outputs[d], b.outputs[d])
    # every output derives from the one cached feature map
    f = prior.features(sample_latent(prior, 4, 2))
    assert torch.equal(a.features, f)
    assert torch.equal(a.outputs["seg"], export(SEG, regress(adapters["seg"], f)))
    assert torch.equal(a.native_rgb, prior.to_rgb_head(f))


def test_sample_without_adapters(prior):
    s = sample_multidomain(prior, [], seed=0)
    assert s.outputs == {} and s.native_rgb.shape == (1, 3, 16, 16)


def test_mix_spec_bounds(prior, adapters):
    n = prior.spec.num_slots
    with pytest.raises(SpecError):
        multimodal_sample(_x(RGB), adapters["rgb"], None, prior, MixSpec(n, n))
    with pytest.raises(SpecError):
        MixSpec(3, 2).validate(n)
    with pytest.raises(SpecError):
        MixSpec.parse("4-8")
    assert MixSpec.parse("2:5", seed=3) == MixSpec(2, 5, 3)


def test_full_mix_ignores_input(prior, adapters):
    n = prior.spec.num_slots
    mix = MixSpec(0, n, seed=11)
    a = multimodal_sample(_x(RGB, seed=0), adapters["rgb"], None, prior, mix)
    b = multimodal_sample(_x(RGB, seed=1), adapters["rgb"], None, prior, mix)
    assert torch.equal(a, b)
    assert torch.allclose(a, prior(sample_latent(prior, 11, 3)))


def test_partial_mix_keeps_early_slots(prior, adapters):
    x = _x(RGB)
    mix = MixSpec(3, prior.spec.num_slots, seed=1)
    y = multimodal_sample(x, adapters["rgb"], adapters["seg"], prior, mix)
    assert y.shape == (3, 16, 16)


def test_mix_needs_wplus(z_prior):
    a = tiny_adapter("rgb", RGB, z_prior).eval()
    with pytest.raises(UnsupportedSpecError):
        multimodal_sample(_x(RGB), a, None, z_prior, MixSpec(0, 1))


def test_progressive_chain(prior, adapters):
    mask = tiny_adapter("coarse", MASK, prior, seed=7).eval()
    x = _x(MASK)
    outs = progressive_translate(x, [mask, adapters["seg"], adapters["rgb"]], prior)
    assert len(outs) == 2
    assert outs[0].dtype == torch.long
    assert outs[-1].shape == (3, 3, 16, 16) and outs[-1].is_floating_point()


def test_progressive_same_domain_chain(prior, adapters):
    a = adapters["seg"]
    x = _x(SEG)
    outs = progressive_translate(x, [a, a, a], prior)
    assert torch.equal(outs[0], reconstruct(x, a, prior))
    assert torch.equal(outs[1], reconstruct(outs[0], a, prior))


def test_progressive_error_carries_index(prior, adapters):
    other = tiny_adapter("stray", SEG, tiny_prior(seed=9))
    with pytest.raises(RegistryError) as info:
        progressive_translate(_x(RGB), [adapters["rgb"], adapters["seg"], other], prior)
    assert info.value.chain_index == 1
    with pytest.raises(ContractError):
        progressive_translate(_x(RGB), [adapters["rgb"]], prior)


def test_semantic_distance_properties(prior, adapters):
    x = _x(RGB, n=1)[0]
    s = _x(SEG, n=1)[0]
    assert semantic_distance(x, adapters["rgb"], x, adapters["rgb"], prior).item() == 0
    d_ab = semantic_distance(x, adapters["rgb"], s, adapters["seg"], prior)
    d_ba = semantic_distance(s, adapters["seg"], x, adapters["rgb"], prior)
    assert d_ab.dim() == 0
    assert torch.allclose(d_ab, d_ba)


def test_semantic_distance_normalization(prior, adapters):
    x, y = _x(RGB, n=1), _x(RGB, n=1, seed=3)
    fa = prior.features(adapters["rgb"].encoder(x)).flatten()
    fb = prior.features(adapters["rgb"].encoder(y)).flatten()
    expected = (fa - fb).norm() / fa.numel()
    got = semantic_distance(x, adapters["rgb"], y, adapters["rgb"], prior)
    assert torch.allclose(got, expected.reshape(1), rtol=1e-5)
    dm = distance_matrix(x, adapters["rgb"], y, adapters["rgb"], prior)
    assert torch.allclose(dm[0, 0].float(), expected, rtol=1e-5)


def test_retrieval_identical_sets(prior, adapters):
    items = _x(RGB, n=6)
    assert retrieval_diagnostic(items, items, adapters["rgb"], adapters["rgb"], prior) == 1.0


def test_retrieval_chance_level_untrained(prior):
    from anchorlab.data import generate_scene, render_domain, GenerationConfig

    gen = GenerationConfig(height=16, width=16)
    scenes = [generate_scene(s, gen) for s in range(100)]
    rgb = torch.stack([torch.from_numpy(render_domain(sc, "rgb", gen).pixels) for sc in scenes])
    seg = torch.stack([torch.from_numpy(render_domain(sc, "segmentation", gen).pixels) for sc in scenes])
    a = tiny_adapter("rgb", RGB, prior, seed=21).eval()
    b = tiny_adapter("seg", SEG, prior, seed=22).eval()
    assert retrieval_diagnostic(rgb, seg, a, b, prior) < 0.1


def test_retrieval_degenerate(prior, adapters):
    with pytest.raises(ContractError):
        retrieval_diagnostic(_x(RGB, n=1), _x(RGB, n=1), adapters["rgb"], adapters["rgb"], prior)
    with pytest.raises(ContractError):
        retrieval_diagnostic(_x(RGB, n=3), _x(RGB, n=2), adapters["rgb"], adapters["rgb"], prior)
