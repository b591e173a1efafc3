"""Anchoring one domain to the frozen prior: loss terms and the training loop.

Per step: z = E(x), f = G_feat(z), x_rgb = ToRGB(f), x_hat = R(f), and
    total = w_rec * rec(x_hat, x) + w_latent * latent(z) + w_adv * adv(x_rgb).
The discriminator takes one step on its own objective before each E/R step.
Only E, R and D are ever updated; the prior's fingerprint is checked at the end.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from .adapters import AdapterConfig, DomainAdapter, build_adapter, config_hash, export, prepare_input
from .data import ImageSet
from .domain import DomainKind
from .errors import ConfigError, ContractError, DomainError, IntegrityError, TrainingError
from .prior import W_PLUS, GeneratorPrior, LatentSpec

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    rec: float = 1.0
    latent: float = 0.005
    adv: float = 0.01

    def __post_init__(self):
        for name in ("rec", "latent", "adv"):
            value = getattr(self, name)
            if not value >= 0:
                raise ConfigError(f"loss weight {name} must be >= 0, got {value}")

    @classmethod
    def default_for(cls, kind: DomainKind) -> "LossWeights":
        # categorical (segmentation-like) domains use 1, continuous ones 10
        return cls(rec=1.0 if kind.is_categorical else 10.0)


def latent_loss(code: torch.Tensor, spec: LatentSpec, mean_latent: torch.Tensor | None = None) -> torch.Tensor:
    """Unsquared l2 distance of each code to the regularization target, averaged over the batch.

    Z codes are pulled to the origin, W+ codes to ``mean_latent``.
    """
    if code.dim() == 2:
        code = code[None]
    if spec.kind == W_PLUS:
        if mean_latent is None:
            raise ContractError("W+ latent regularization needs the mean latent")
        code = code - mean_latent.to(code.dtype)
    return torch.linalg.vector_norm(code.flatten(1), dim=1).mean()


def adversarial_losses(disc, real_rgb: torch.Tensor, generated_rgb: torch.Tensor):
    """Non-saturating GAN terms: returns (generator_term, discriminator_term).

    The discriminator term sees the generated batch detached, so it only
    trains D; the generator term carries gradients back to whatever produced
    ``generated_rgb``.
    """
    real_logits = disc(real_rgb)
    fake_logits_d = disc(generated_rgb.detach())
    fake_logits_g = disc(generated_rgb)
    for logits in (real_logits, fake_logits_d):
        if not torch.isfinite(logits).all():
            raise TrainingError("discriminator produced non-finite scores")
    # -log sigmoid(t) = softplus(-t); -log(1 - sigmoid(t)) = softplus(t)
    disc_term = F.softplus(-real_logits).mean() + F.softplus(fake_logits_d).mean()
    gen_term = F.softplus(-fake_logits_g).mean()
    return gen_term, disc_term


def reconstruction_loss(prediction: torch.Tensor, target: torch.Tensor, kind: DomainKind) -> torch.Tensor:
    """Mean squared error for continuous domains, mean per-pixel cross-entropy
    over logits for categorical ones."""
    if kind.is_categorical:
        if target.is_floating_point():
            raise DomainError("categorical targets must be class indices")
        if target.dim() == 2:
            target = target[None]
        if prediction.dim() == 3:
            prediction = prediction[None]
        if prediction.shape[1] != kind.channels or prediction.shape[2:] != target.shape[1:] \
                or prediction.shape[0] != target.shape[0]:
            raise DomainError(f"logits {tuple(prediction.shape)} do not match targets {tuple(target.shape)}")
        return F.cross_entropy(prediction, target.long())
    if prediction.shape != target.shape:
        raise DomainError(f"prediction {tuple(prediction.shape)} and target {tuple(target.shape)} differ")
    if prediction.shape[-3] != kind.channels:
        raise DomainError(f"expected {kind.channels} channels, got {prediction.shape[-3]}")
    return F.mse_loss(prediction, target.to(prediction.dtype))


def total_loss(rec, latent, adv, weights: LossWeights):
    for name, value in (("rec", rec), ("latent", latent), ("adv", adv)):
        if not math.isfinite(float(value.detach() if torch.is_tensor(value) else value)):
            raise TrainingError(f"non-finite {name} loss component")
    return weights.rec * rec + weights.latent * latent + weights.adv * adv


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainingConfig:
    steps: int = 5000
    batch_size: int = 4
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weights: LossWeights | None = None  # None: LossWeights.default_for(kind)
    adversarial_enabled: bool = True
    snapshot_every: int = 1000
    snapshot_items: int = 4
    log_every: int = 500
    seed: int = 0
    adapter: AdapterConfig = field(default_factory=AdapterConfig)

    def validate(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        d = dict(d)
        try:
            if isinstance(d.get("weights"), dict):
                d["weights"] = LossWeights(**d["weights"])
            if isinstance(d.get("adapter"), dict):
                d["adapter"] = AdapterConfig.from_dict(d["adapter"])
            if "betas" in d:
                d["betas"] = tuple(d["betas"])
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class TrainingReport:
    rec: list[float] = field(default_factory=list)
    latent: list[float] = field(default_factory=list)
    adv: list[float] = field(default_factory=list)
    total: list[float] = field(default_factory=list)
    disc: list[float] = field(default_factory=list)
    snapshots: list[str] = field(default_factory=list)
    adapter: DomainAdapter | None = None
    wall_clock_s: float = 0.0

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "rec", "latent", "adv", "total"])
            for step, row in enumerate(zip(self.rec, self.latent, self.adv, self.total)):
                writer.writerow([step, *(repr(v) for v in row)])


def _snapshot(adapter, prior, images, kind, path):
    from .viz import save_grid

    was_training = adapter.training
    adapter.eval()
    with torch.no_grad():
        f = prior.features(adapter.encoder(prepare_input(adapter, images)))
        x_hat = export(kind, adapter.regressor(f))
        x_rgb = prior.to_rgb_head(f)
    adapter.train(was_training)
    cells = []
    for i in range(len(images)):
        cells += [images[i], x_hat[i], x_rgb[i]]
    save_grid(cells, path, ncols=3)


def train_domain(dataset: ImageSet, prior: GeneratorPrior, kind: DomainKind, config: TrainingConfig,
                 domain_id: str | None = None, real_rgb: torch.Tensor | None = None,
                 run_dir=None) -> tuple[DomainAdapter, TrainingReport]:
    """Train one domain's encoder/regressor (and discriminator) against the frozen prior.

    ``real_rgb`` is the prior's own RGB training set, the discriminator's real
    distribution; it is required when the adversarial term is enabled.
    """
    config.validate()
    if len(dataset) == 0:
        raise ConfigError("empty training dataset")
    if dataset.kind != kind:
        raise DomainError(f"dataset kind {dataset.kind} does not match requested kind {kind}")
    if not prior.frozen:
        raise ContractError("the prior must be frozen before anchoring")
    if config.adversarial_enabled and real_rgb is None:
        raise ConfigError("adversarial training needs the prior's real RGB image set")
    weights = config.weights or LossWeights.default_for(kind)
    domain_id = domain_id or dataset.domain_id
    fingerprint = prior.fingerprint
    run_dir = Path(run_dir) if run_dir else None
    if run_dir:
        (run_dir / "snapshots").mkdir(parents=True, exist_ok=True)

    torch.manual_seed(config.seed)
    adapter_cfg = AdapterConfig.from_dict(config.adapter.to_dict())
    adapter_cfg.seed = config.seed
    adapter = build_adapter(domain_id, kind, prior, adapter_cfg, adversarial=config.adversarial_enabled)
    adapter.train()
    trainable = list(adapter.encoder.parameters()) + list(adapter.regressor.parameters())
    opt = torch.optim.Adam(trainable, lr=config.lr, betas=config.betas)
    disc = adapter.discriminator
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.lr, betas=config.betas) if disc is not None else None

    gen = torch.Generator().manual_seed(config.seed)
    images = dataset.images
    n = len(images)
    snap_images = images[: min(config.snapshot_items, n)]
    report = TrainingReport()
    started = time.time()
    zero = torch.zeros(())

    for step in range(config.steps):
        if run_dir and config.snapshot_every and step % config.snapshot_every == 0:
            path = run_dir / "snapshots" / f"step_{step}.png"
            _snapshot(adapter, prior, snap_images, kind, path)
            report.snapshots.append(str(path))

        x = images[torch.randint(n, (config.batch_size,), generator=gen)]
        code = adapter.encoder(prepare_input(adapter, x))
        f = prior.features(code)
        rec = reconstruction_loss(adapter.regressor(f), x, kind)
        lat = latent_loss(code, prior.spec, prior.mean_latent)

        if disc is not None:
            real = real_rgb[torch.randint(len(real_rgb), (config.batch_size,), generator=gen)]
            x_rgb = prior.to_rgb_head(f)
            disc.requires_grad_(True)
            d_term = F.softplus(-disc(real)).mean() + F.softplus(disc(x_rgb.detach())).mean()
            if not torch.isfinite(d_term):
                raise TrainingError("non-finite discriminator loss", step=step)
            opt_d.zero_grad(set_to_none=True)
            d_term.backward()
            opt_d.step()
            disc.requires_grad_(False)
            adv = F.softplus(-disc(x_rgb)).mean()
            report.disc.append(d_term.item())
        else:
            adv = zero

        try:
            total = total_loss(rec, lat, adv, weights)
        except TrainingError as exc:
            raise TrainingError(str(exc), step=step) from exc
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()

        report.rec.append(rec.item())
        report.latent.append(lat.item())
        report.adv.append(adv.item())
        report.total.append(total.item())
        if config.log_every and step % config.log_every == 0:
            log.info("%s step %d rec=%.4f latent=%.4f adv=%.4f", domain_id, step, rec.item(), lat.item(), adv.item())

    if prior.fingerprint != fingerprint:
        raise IntegrityError("the prior's weights changed during anchoring")

    adapter.eval()
    for p in adapter.parameters():
        p.requires_grad_(False)
    adapter.training_config_hash = config_hash(config.to_dict())
    report.adapter = adapter
    report.wall_clock_s = time.time() - started
    if run_dir:
        path = run_dir / "snapshots" / f"step_{config.steps}.png"
        _snapshot(adapter, prior, snap_images, kind, path)
        report.snapshots.append(str(path))
        report.write_csv(run_dir / "losses.csv")
    return adapter, report


@torch.no_grad()
def evaluate_losses(adapter: DomainAdapter, prior: GeneratorPrior, dataset: ImageSet, batch_size: int = 50) -> dict:
    """Mean reconstruction and latent losses of a trained adapter over a held-out set (eval mode)."""
    adapter.eval()
    rec_sum = lat_sum = 0.0
    images = dataset.images
    for start in range(0, len(images), batch_size):
        x = images[start:start + batch_size]
        code = adapter.encoder(prepare_input(adapter, x))
        pred = adapter.regressor(prior.features(code))
        rec_sum += reconstruction_loss(pred, x, adapter.kind).item() * len(x)
        lat_sum += latent_loss(code, prior.spec, prior.mean_latent).item() * len(x)
    return {"rec": rec_sum / len(images), "latent": lat_sum / len(images)}
