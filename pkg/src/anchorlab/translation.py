"""Inference: composing encoders and regressors of any registered domains.

Everything here is read-only over the frozen prior and adapters and runs
under ``torch.no_grad`` with all modules in eval mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .adapters import DomainAdapter, encode, export, regress
from .errors import AnchorError, ContractError, RegistryError, SpecError, UnsupportedSpecError
from .prior import W_PLUS, GeneratorPrior, gaussian, generate_features, map_latents, sample_latent


@dataclass(frozen=True)
class MixSpec:
    """Replace W+ slots [start, end) with freshly mapped latents drawn from ``seed``."""

    start: int
    end: int
    seed: int = 0

    def validate(self, num_slots: int):
        if not 0 <= self.start < self.end <= num_slots:
            raise SpecError(f"mix slots [{self.start}, {self.end}) invalid for {num_slots} slots")

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "MixSpec":
        try:
            start, end = (int(v) for v in text.split(":"))
        except ValueError as exc:
            raise SpecError(f"bad slot range {text!r}; expected 'start:end'") from exc
        return cls(start, end, seed)


def check_compatible(prior: GeneratorPrior, *adapters: DomainAdapter, fingerprint: str | None = None):
    fp = fingerprint or prior.fingerprint
    for a in adapters:
        if a.prior_fingerprint != fp:
            raise RegistryError(f"adapter {a.domain_id!r} was trained against a different prior")
        a.eval()
    prior.eval()
    return fp


@torch.no_grad()
def anchor_features(x, adapter: DomainAdapter, prior: GeneratorPrior) -> torch.Tensor:
    """G_feat(E(x)) for a batch of domain images."""
    return generate_features(prior, encode(adapter, x))


@torch.no_grad()
def translate(x, src: DomainAdapter, dst: DomainAdapter, prior: GeneratorPrior, raw: bool = False) -> torch.Tensor:
    """R_dst(G_feat(E_src(x))), exported to ``dst``'s value model unless ``raw``."""
    check_compatible(prior, src, dst)
    out = regress(dst, anchor_features(x, src, prior))
    return out if raw else export(dst.kind, out)


def reconstruct(x, adapter: DomainAdapter, prior: GeneratorPrior, raw: bool = False) -> torch.Tensor:
    return translate(x, adapter, adapter, prior, raw=raw)


@dataclass
class MultiDomainSample:
    features: torch.Tensor
    native_rgb: torch.Tensor
    outputs: dict = field(default_factory=dict)


@torch.no_grad()
def sample_multidomain(prior: GeneratorPrior, adapters, seed: int, n: int = 1) -> MultiDomainSample:
    """Decode one seeded latent batch into the native RGB image and every adapter's domain."""
    adapters = list(adapters)
    check_compatible(prior, *adapters)
    dtype = next(prior.parameters()).dtype
    f = generate_features(prior, sample_latent(prior, seed, n).to(dtype))
    sample = MultiDomainSample(features=f, native_rgb=prior.to_rgb_head(f))
    for a in adapters:
        sample.outputs[a.domain_id] = export(a.kind, regress(a, f))
    return sample


@torch.no_grad()
def multimodal_sample(x, src: DomainAdapter, dst: DomainAdapter | None, prior: GeneratorPrior, mix: MixSpec,
                      raw: bool = False) -> torch.Tensor:
    """Encode ``x``, swap the mixed W+ slots for random mapped latents, and decode
    through ``dst`` (or the prior's ToRGB head when ``dst`` is None)."""
    if prior.spec.kind != W_PLUS:
        raise UnsupportedSpecError("slot mixing needs a W+ prior")
    mix.validate(prior.spec.num_slots)
    check_compatible(prior, src, *([dst] if dst is not None else []))
    code = encode(src, x).clone()
    replacement = map_latents(prior, gaussian(prior.spec.dim, mix.seed, code.shape[0]).to(code.dtype))
    code[:, mix.start:mix.end] = replacement[:, mix.start:mix.end]
    f = generate_features(prior, code)
    if dst is None:
        return prior.to_rgb_head(f)
    out = regress(dst, f)
    return out if raw else export(dst.kind, out)


def progressive_translate(x, chain, prior: GeneratorPrior) -> list[torch.Tensor]:
    """Translate along ``chain`` step by step, feeding each output to the next step."""
    chain = list(chain)
    if len(chain) < 2:
        raise ContractError("a translation chain needs at least two adapters")
    outputs = []
    current = x
    for i, (src, dst) in enumerate(zip(chain, chain[1:])):
        try:
            current = translate(current, src, dst, prior)
        except AnchorError as exc:
            err = type(exc)(f"chain step {i} ({src.domain_id} -> {dst.domain_id}): {exc}")
            err.chain_index = i
            raise err from exc
        outputs.append(current)
    return outputs


@torch.no_grad()
def semantic_distance(x_a, adapter_a: DomainAdapter, x_b, adapter_b: DomainAdapter,
                      prior: GeneratorPrior) -> torch.Tensor:
    """||G_feat(E_a(x_a)) - G_feat(E_b(x_b))||_2 divided by the feature element count.

    Batched inputs give one distance per pair; single images give a scalar.
    """
    check_compatible(prior, adapter_a, adapter_b)
    single = _is_single(x_a, adapter_a)
    fa = anchor_features(x_a, adapter_a, prior).flatten(1)
    fb = anchor_features(x_b, adapter_b, prior).flatten(1)
    d = torch.linalg.vector_norm(fa - fb, dim=1) / fa.shape[1]
    return d[0] if single else d


def _is_single(x, adapter) -> bool:
    return x.dim() == (2 if adapter.kind.is_categorical else 3)


@torch.no_grad()
def distance_matrix(items_a, adapter_a, items_b, adapter_b, prior, batch_size: int = 50) -> torch.Tensor:
    """Pairwise semantic distances, rows over ``items_a`` and columns over ``items_b``."""
    check_compatible(prior, adapter_a, adapter_b)
    fa = torch.cat([anchor_features(items_a[i:i + batch_size], adapter_a, prior).flatten(1)
                    for i in range(0, len(items_a), batch_size)])
    fb = torch.cat([anchor_features(items_b[i:i + batch_size], adapter_b, prior).flatten(1)
                    for i in range(0, len(items_b), batch_size)])
    return torch.cdist(fa.double(), fb.double()) / fa.shape[1]


def retrieval_diagnostic(items_a, items_b, adapter_a: DomainAdapter, adapter_b: DomainAdapter,
                         prior: GeneratorPrior) -> float:
    """Fraction of domain-A items whose paired domain-B item is the nearest in anchored feature space.

    ``items_a[i]`` and ``items_b[i]`` are the same scene in the two domains.
    """
    if len(items_a) != len(items_b):
        raise ContractError("paired item sets must have equal length")
    if len(items_a) < 2:
        raise ContractError("retrieval needs at least two pairs")
    d = distance_matrix(items_a, adapter_a, items_b, adapter_b, prior)
    hits = d.argmin(dim=1) == torch.arange(len(items_a))
    return hits.double().mean().item()
