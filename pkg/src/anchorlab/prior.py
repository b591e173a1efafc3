"""The frozen generator prior, G = ToRGB o G_feat.

Two backbones are available: a style-based generator whose per-layer styles
form a W+ code of shape (num_slots, dim), and a plain generator driven by a
single Gaussian z of shape (1, dim). Latent codes are passed around as
tensors of shape (N, num_slots, dim); feature maps as (N, C_f, H_f, W_f).
"""

from __future__ import annotations

import copy
import hashlib
import io
import logging
import math
import pickle
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, CorruptionError, SpecError, StorageError, TrainingError, UnsupportedSpecError
from .layers import ConvDiscriminator, MappingNetwork, ModulatedConv, PixelNorm, count_parameters

log = logging.getLogger(__name__)

PRIOR_FORMAT = "anchor-prior/1"
Z, W_PLUS = "Z", "W_PLUS"


@dataclass(frozen=True)
class LatentSpec:
    kind: str
    dim: int
    num_slots: int = 1

    def __post_init__(self):
        if self.kind not in (Z, W_PLUS):
            raise SpecError(f"unknown latent kind {self.kind!r}")
        if self.dim < 1 or self.num_slots < 1:
            raise SpecError("latent dim and slot count must be >= 1")
        if self.kind == Z and self.num_slots != 1:
            raise SpecError("a Z latent has exactly one slot")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.num_slots, self.dim)


@dataclass
class GeneratorConfig:
    backbone: str = "style"  # "style" (W+) or "plain" (Z)
    resolution: int = 64
    latent_dim: int = 64
    mapping_layers: int = 4
    channels: dict = field(default_factory=lambda: {4: 192, 8: 64, 16: 32, 32: 32, 64: 32})

    def __post_init__(self):
        self.channels = {int(k): int(v) for k, v in self.channels.items()}

    def validate(self):
        if self.backbone not in ("style", "plain"):
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        r = self.resolution
        if r < 8 or r & (r - 1):
            raise ConfigError(f"generator resolution must be a power of two >= 8, got {r}")
        missing = [s for s in self.resolutions if s not in self.channels]
        if missing:
            raise ConfigError(f"no channel count for resolutions {missing}")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")

    @property
    def resolutions(self) -> list[int]:
        return [2**i for i in range(2, int(math.log2(self.resolution)) + 1)]

    @property
    def feature_channels(self) -> int:
        return self.channels[self.resolution]


class StyleFeatureGenerator(nn.Module):
    """Style-based feature generator.

    Slot 0 of the W+ code is projected to the 4x4 input tensor (so coarse
    layout is latent-controlled); every later slot modulates one convolution.
    """

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        d = cfg.latent_dim
        self.mapping = MappingNetwork(d, cfg.mapping_layers)
        res = cfg.resolutions
        self.c4 = cfg.channels[4]
        self.const = nn.Parameter(torch.randn(1, self.c4, 4, 4))
        self.input = nn.Linear(d, self.c4 * 16)
        convs = [ModulatedConv(cfg.channels[4], cfg.channels[4], d)]
        for prev, cur in zip(res, res[1:]):
            convs.append(ModulatedConv(cfg.channels[prev], cfg.channels[cur], d, upsample=True))
            convs.append(ModulatedConv(cfg.channels[cur], cfg.channels[cur], d))
        self.convs = nn.ModuleList(convs)

    @property
    def num_slots(self) -> int:
        return 1 + len(self.convs)

    def forward(self, w):
        x = self.const + self.input(w[:, 0]).reshape(-1, self.c4, 4, 4)
        for i, conv in enumerate(self.convs, start=1):
            x = conv(x, w[:, i])
        return x


class PlainFeatureGenerator(nn.Module):
    """z -> linear 4x4 seed -> (upsample, conv, conv) stages."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        d, c4 = cfg.latent_dim, cfg.channels[4]
        self.mapping = None
        self.fc = nn.Linear(d, c4 * 16)
        self.c4 = c4
        blocks = []
        res = cfg.resolutions
        for prev, cur in zip(res, res[1:]):
            blocks += [
                nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
                nn.Conv2d(cfg.channels[prev], cfg.channels[cur], 3, padding=1),
                nn.LeakyReLU(0.2),
                PixelNorm(),
                nn.Conv2d(cfg.channels[cur], cfg.channels[cur], 3, padding=1),
                nn.LeakyReLU(0.2),
                PixelNorm(),
            ]
        self.body = nn.Sequential(*blocks)
        self.num_slots = 1

    def forward(self, z):
        x = F.leaky_relu(self.fc(z[:, 0]), 0.2).reshape(-1, self.c4, 4, 4)
        return self.body(x)


class ToRGB(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, 3, 1)

    def forward(self, f):
        return torch.tanh(self.conv(f))


class GeneratorPrior(nn.Module):
    """Feature generator, ToRGB head, latent spec and mean latent.

    Frozen priors have every parameter flagged non-trainable and sit in eval
    mode; ``fingerprint`` hashes the weights.
    """

    def __init__(self, config: GeneratorConfig, features: nn.Module | None = None, to_rgb: nn.Module | None = None):
        super().__init__()
        config.validate()
        self.config = config
        if features is None:
            features = StyleFeatureGenerator(config) if config.backbone == "style" else PlainFeatureGenerator(config)
        self.features = features
        self.to_rgb_head = to_rgb if to_rgb is not None else ToRGB(config.feature_channels)
        if config.backbone == "style":
            self.spec = LatentSpec(W_PLUS, config.latent_dim, self.features.num_slots)
        else:
            self.spec = LatentSpec(Z, config.latent_dim, 1)
        self.register_buffer("mean_latent", torch.zeros(self.spec.shape))
        self.provenance: dict = {}

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        r = self.config.resolution
        return (self.config.feature_channels, r, r)

    @property
    def mapping(self):
        return getattr(self.features, "mapping", None)

    def forward(self, code):
        """The full generator G(code)."""
        return self.to_rgb_head(self.features(code))

    def freeze(self) -> "GeneratorPrior":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    @property
    def fingerprint(self) -> str:
        return weights_fingerprint(self)


def weights_fingerprint(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        t = tensor.detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# latents


def gaussian(dim: int, seed: int, n: int = 1) -> torch.Tensor:
    """(n, dim) standard normal draws; row i does not depend on n."""
    rng = np.random.default_rng(seed)
    return torch.from_numpy(rng.standard_normal((n, dim)).astype(np.float32))


def sample_latent(source, seed: int, n: int = 1) -> torch.Tensor:
    """Seeded latent codes of shape (n, num_slots, dim).

    ``source`` is a GeneratorPrior or, for Z-space, a bare LatentSpec. W+
    codes map one z per sample through the prior's mapping head and
    replicate it across slots.
    """
    if isinstance(source, LatentSpec):
        spec, prior = source, None
    else:
        prior, spec = source, source.spec
    z = gaussian(spec.dim, seed, n)
    if spec.kind == Z:
        return z[:, None, :]
    if prior is None or prior.mapping is None:
        raise SpecError("W+ sampling needs the prior's mapping head")
    param = next(prior.parameters())
    with torch.no_grad():
        w = prior.mapping(z.to(param.dtype))
    return w[:, None, :].expand(n, spec.num_slots, spec.dim).contiguous()


def map_latents(prior: GeneratorPrior, z: torch.Tensor) -> torch.Tensor:
    """Map raw Gaussian rows (n, dim) to W+ codes (n, num_slots, dim)."""
    if prior.spec.kind != W_PLUS:
        raise UnsupportedSpecError("mapping is only defined for W+ priors")
    w = prior.mapping(z)
    return w[:, None, :].expand(-1, prior.spec.num_slots, -1).contiguous()


def estimate_mean_latent(prior: GeneratorPrior, n_samples: int = 10_000, seed: int = 0,
                         chunk: int = 4096) -> torch.Tensor:
    """Monte-Carlo mean of mapped latents; stored as ``prior.mean_latent``."""
    if prior.spec.kind != W_PLUS:
        raise UnsupportedSpecError("Z-space priors regularize toward the origin; no mean latent")
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    z = gaussian(prior.spec.dim, seed, n_samples)
    dtype = prior.mean_latent.dtype
    total = torch.zeros(prior.spec.dim, dtype=torch.float64)
    with torch.no_grad():
        for start in range(0, n_samples, chunk):
            total += prior.mapping(z[start:start + chunk].to(dtype)).double().sum(0)
    mean = (total / n_samples).to(dtype)
    prior.mean_latent.copy_(mean[None].expand(prior.spec.num_slots, -1))
    return prior.mean_latent.clone()


def check_code(prior: GeneratorPrior, code: torch.Tensor) -> torch.Tensor:
    if code.dim() == 2:
        code = code[None]
    if code.dim() != 3 or tuple(code.shape[1:]) != prior.spec.shape:
        raise SpecError(f"latent code shape {tuple(code.shape)} does not match spec {prior.spec.shape}")
    return code


def generate_features(prior: GeneratorPrior, code: torch.Tensor) -> torch.Tensor:
    """Pre-ToRGB activations for a batch of codes. Differentiable in ``code``."""
    return prior.features(check_code(prior, code))


def to_rgb(prior: GeneratorPrior, f: torch.Tensor) -> torch.Tensor:
    if f.dim() == 3:
        f = f[None]
    if tuple(f.shape[1:]) != prior.feature_shape:
        raise SpecError(f"feature map shape {tuple(f.shape)} does not match {prior.feature_shape}")
    return prior.to_rgb_head(f)


def dump_feature_channels(prior: GeneratorPrior, code: torch.Tensor, channel_indices, path=None,
                          pad: int = 1) -> np.ndarray:
    """Tile selected feature channels of one code into a grayscale grid.

    Each cell is min-max normalized to [0, 1]; a constant channel renders 0.5.
    Returns the grid as float array and writes an 8-bit PNG if ``path`` is given.
    """
    from PIL import Image

    c = prior.feature_shape[0]
    idx = [int(i) for i in channel_indices]
    if not idx:
        raise SpecError("no channels requested")
    bad = [i for i in idx if not 0 <= i < c]
    if bad:
        raise SpecError(f"channel indices {bad} out of range [0, {c})")
    with torch.no_grad():
        f = generate_features(prior, code)[0].double().cpu().numpy()
    h, w = f.shape[1:]
    ncols = math.ceil(math.sqrt(len(idx)))
    nrows = math.ceil(len(idx) / ncols)
    grid = np.zeros((nrows * (h + pad) + pad, ncols * (w + pad) + pad))
    for k, ch in enumerate(idx):
        plane = f[ch]
        lo, hi = plane.min(), plane.max()
        cell = np.full_like(plane, 0.5) if hi - lo <= 1e-12 else (plane - lo) / (hi - lo)
        r, col = divmod(k, ncols)
        y0, x0 = pad + r * (h + pad), pad + col * (w + pad)
        grid[y0:y0 + h, x0:x0 + w] = cell
    if path is not None:
        Image.fromarray(np.round(grid * 255).astype(np.uint8)).save(path, format="PNG")
    return grid


# ---------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    steps: int = 3000
    batch_size: int = 16
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.99)
    r1_gamma: float = 1.0
    r1_every: int = 4
    disc_channels: int = 32
    mean_latent_samples: int = 10_000
    style_mixing: float = 0.9  # probability of a two-latent crossover per W+ training code
    mapping_lr_mult: float = 1.0  # learning-rate factor for the mapping MLP
    ema_beta: float = 0.999  # the returned prior is a moving average of the trained weights; 0 disables
    seed: int = 0
    snapshot_every: int = 0  # 0: only the final grid
    log_every: int = 100

    def validate(self):
        self.generator.validate()
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("batch_size must be >= 1 and lr > 0")
        if not 0 <= self.style_mixing <= 1:
            raise ConfigError(f"style_mixing is a probability, got {self.style_mixing}")
        if not 0 <= self.ema_beta < 1 or self.mapping_lr_mult <= 0:
            raise ConfigError("ema_beta must be in [0, 1) and mapping_lr_mult > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        d = dict(d)
        try:
            if "generator" in d and isinstance(d["generator"], dict):
                d["generator"] = GeneratorConfig(**d["generator"])
            if "betas" in d:
                d["betas"] = tuple(d["betas"])
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def _sample_train_codes(prior: GeneratorPrior, n: int, gen: torch.Generator, mixing: float = 0.0) -> torch.Tensor:
    z = torch.randn(n, prior.spec.dim, generator=gen)
    if prior.spec.kind == Z:
        return z[:, None]
    codes = map_latents(prior, z)
    if mixing > 0:
        # style mixing: slots from a random crossover point onward come from a second latent
        other = map_latents(prior, torch.randn(n, prior.spec.dim, generator=gen))
        cut = torch.randint(1, prior.spec.num_slots, (n, 1), generator=gen)
        cut = torch.where(torch.rand(n, 1, generator=gen) < mixing, cut, torch.full_like(cut, prior.spec.num_slots))
        late = torch.arange(prior.spec.num_slots)[None] >= cut
        codes = torch.where(late[..., None], other, codes)
    return codes


def pretrain_generator(rgb_images: torch.Tensor, config: PretrainConfig, snapshot_dir=None) -> GeneratorPrior:
    """Train a generator on RGB images in [-1, 1] with the non-saturating GAN
    loss and a lazy R1 penalty on reals, then freeze it."""
    config.validate()
    gcfg = config.generator
    if rgb_images.dim() != 4 or rgb_images.shape[1] != 3:
        raise ConfigError("pretraining needs a continuous 3-channel (RGB) image set")
    if rgb_images.shape[-1] != gcfg.resolution:
        raise ConfigError(
            f"images are {rgb_images.shape[-1]}px but the generator resolution is {gcfg.resolution}"
        )
    torch.manual_seed(config.seed)
    prior = GeneratorPrior(gcfg)
    disc = ConvDiscriminator(gcfg.resolution, 3, config.disc_channels,
                             n_layers=int(math.log2(gcfg.resolution)) - 2, minibatch_std=True)
    mapping = list(prior.mapping.parameters()) if prior.mapping is not None else []
    rest = [p for p in prior.parameters() if all(p is not q for q in mapping)]
    groups = [{"params": rest}] + ([{"params": mapping, "lr": config.lr * config.mapping_lr_mult}] if mapping else [])
    opt_g = torch.optim.Adam(groups, lr=config.lr, betas=config.betas)
    ema = copy.deepcopy(prior) if config.ema_beta > 0 else prior
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.lr, betas=config.betas)
    gen = torch.Generator().manual_seed(config.seed)
    n = len(rgb_images)
    started = time.time()
    history = []
    for step in range(config.steps):
        real = rgb_images[torch.randint(n, (config.batch_size,), generator=gen)]
        with torch.no_grad():
            fake = prior(_sample_train_codes(prior, config.batch_size, gen, config.style_mixing))
        d_loss = F.softplus(-disc(real)).mean() + F.softplus(disc(fake)).mean()
        r1 = torch.zeros(())
        if config.r1_gamma > 0 and step % config.r1_every == 0:
            real_req = real.detach().requires_grad_(True)
            (grad,) = torch.autograd.grad(disc(real_req).sum(), real_req, create_graph=True)
            r1 = grad.pow(2).flatten(1).sum(1).mean() * (config.r1_gamma / 2 * config.r1_every)
        opt_d.zero_grad(set_to_none=True)
        (d_loss + r1).backward()
        opt_d.step()

        fake = prior(_sample_train_codes(prior, config.batch_size, gen, config.style_mixing))
        g_loss = F.softplus(-disc(fake)).mean()
        opt_g.zero_grad(set_to_none=True)
        g_loss.backward()
        opt_g.step()
        if ema is not prior:
            # ramp the decay up so short runs still move the average
            beta = min(config.ema_beta, (1 + step) / (10 + step))
            with torch.no_grad():
                for pe, p in zip(ema.parameters(), prior.parameters()):
                    pe.lerp_(p, 1 - beta)

        if not (torch.isfinite(d_loss) and torch.isfinite(g_loss) and torch.isfinite(r1)):
            raise TrainingError("generator pretraining diverged: non-finite loss", step=step)
        history.append((d_loss.item(), g_loss.item()))
        if config.log_every and step % config.log_every == 0:
            log.info("pretrain step %d d=%.4f g=%.4f", step, d_loss.item(), g_loss.item())
        if snapshot_dir and config.snapshot_every and step and step % config.snapshot_every == 0:
            write_sample_grid(ema, Path(snapshot_dir) / f"prior_step_{step}.png")

    prior = ema.freeze()
    if prior.spec.kind == W_PLUS:
        estimate_mean_latent(prior, config.mean_latent_samples, seed=config.seed)
    prior.provenance = {
        "steps": config.steps,
        "seed": config.seed,
        "train_images": n,
        "final_d_loss": history[-1][0],
        "final_g_loss": history[-1][1],
        "parameters": count_parameters(prior),
    }
    # wall clock stays out of the checkpoint so reruns produce identical bytes
    log.info("pretraining took %.1fs", time.time() - started)
    if snapshot_dir:
        write_sample_grid(prior, Path(snapshot_dir) / "prior_samples.png")
    return prior


def write_sample_grid(prior: GeneratorPrior, path, n: int = 16, seed: int = 0):
    from .viz import save_grid

    was_training = prior.training
    prior.eval()
    with torch.no_grad():
        imgs = prior(sample_latent(prior, seed, n).to(next(prior.parameters()).dtype))
    prior.train(was_training)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_grid(list(imgs), path, ncols=int(math.ceil(math.sqrt(n))))


# ---------------------------------------------------------------------------
# checkpoints


def prior_to_bytes(prior: GeneratorPrior) -> bytes:
    payload = {
        "format": PRIOR_FORMAT,
        "generator": asdict(prior.config),
        "spec": asdict(prior.spec),
        "state_dict": prior.state_dict(),
        "fingerprint": prior.fingerprint,
        "provenance": prior.provenance,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    return buf.getvalue()


def save_prior(prior: GeneratorPrior, path):
    try:
        Path(path).write_bytes(prior_to_bytes(prior))
    except OSError as exc:
        raise StorageError(f"cannot write prior checkpoint {path}: {exc}") from exc


def load_prior(path) -> GeneratorPrior:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise CorruptionError(f"cannot read prior checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != PRIOR_FORMAT:
        raise CorruptionError(f"{path} is not an {PRIOR_FORMAT} checkpoint")
    prior = GeneratorPrior(GeneratorConfig(**payload["generator"]))
    prior.load_state_dict(payload["state_dict"])
    prior.provenance = payload.get("provenance", {})
    prior.freeze()
    if prior.fingerprint != payload["fingerprint"]:
        raise CorruptionError(f"prior checkpoint {path} fails its fingerprint check")
    if asdict(prior.spec) != payload["spec"]:
        raise CorruptionError(f"prior checkpoint {path} has an inconsistent latent spec")
    return prior
