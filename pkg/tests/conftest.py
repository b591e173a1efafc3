import pytest
import torch

from anchorlab.adapters import AdapterConfig, EncoderConfig, RegressorConfig, build_adapter
from anchorlab.anchoring import TrainingConfig
from anchorlab.data import DatasetConfig, DomainSpec, GenerationConfig, build_dataset, load_manifest
from anchorlab.domain import DomainKind
from anchorlab.prior import GeneratorConfig, GeneratorPrior, estimate_mean_latent

TINY_CHANNELS = {4: 8, 8: 8, 16: 8}


def tiny_generator_config(backbone="style", resolution=16, latent_dim=8):
    return GeneratorConfig(backbone=backbone, resolution=resolution, latent_dim=latent_dim,
                           mapping_layers=2, channels=dict(TINY_CHANNELS))


def tiny_prior(backbone="style", seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    prior = GeneratorPrior(tiny_generator_config(backbone)).to(dtype).freeze()
    if prior.spec.kind == "W_PLUS":
        estimate_mean_latent(prior, 500, seed=seed)
    return prior


def tiny_adapter_config(seed=0):
    return AdapterConfig(encoder=EncoderConfig(resolution=16, stem_channels=4, max_channels=8, pyramid_channels=8),
                         regressor=RegressorConfig(width=0.125), discriminator_channels=4, seed=seed)


def tiny_adapter(domain_id, kind, prior, seed=0, adversarial=False):
    return build_adapter(domain_id, kind, prior, tiny_adapter_config(seed), adversarial=adversarial)


def tiny_training(steps=3, **kw):
    return TrainingConfig(steps=steps, batch_size=2, snapshot_every=0, log_every=0,
                          adapter=tiny_adapter_config(kw.pop("seed", 0)), **kw)


@pytest.fixture
def prior():
    return tiny_prior()


@pytest.fixture
def z_prior():
    return tiny_prior("plain")


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    cfg = DatasetConfig(
        root=str(root),
        domains=[DomainSpec("rgb", "rgb"), DomainSpec("seg", "segmentation"), DomainSpec("edge", "edge")],
        train_per_domain=12, eval_count=6, generation=GenerationConfig(height=16, width=16),
    )
    build_dataset(cfg)
    return load_manifest(root)


RGB = DomainKind.continuous(3)
SEG = DomainKind.categorical(4)
EDGE = DomainKind.continuous(1)
