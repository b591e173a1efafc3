"""Per-domain trainable models: encoder E (image -> latent code), regressor R
(pre-ToRGB features -> domain image) and an optional RGB discriminator D."""

from __future__ import annotations

import hashlib
import io
import json
import math
import pickle
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .domain import DomainKind
from .errors import ConfigError, CorruptionError, DomainError, SpecError, StorageError
from .layers import ConvDiscriminator, count_parameters
from .prior import W_PLUS, GeneratorPrior, LatentSpec

ADAPTER_FORMAT = "anchor-adapter/1"
REGRESSOR_CHANNELS = (128, 64, 64, 32, 32)


@dataclass
class EncoderConfig:
    resolution: int = 64
    stem_channels: int = 16
    max_channels: int = 64
    pyramid_channels: int = 32
    head_init_scale: float = 0.1


@dataclass
class RegressorConfig:
    width: float = 0.25
    resolution: int | None = None  # upsample to this size before the output layer
    kernel_size: int = 3
    norm: str = "batch"  # "batch" or "none"


@dataclass
class AdapterConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    regressor: RegressorConfig = field(default_factory=RegressorConfig)
    discriminator_channels: int = 32
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterConfig":
        d = dict(d)
        try:
            if isinstance(d.get("encoder"), dict):
                d["encoder"] = EncoderConfig(**d["encoder"])
            if isinstance(d.get("regressor"), dict):
                d["regressor"] = RegressorConfig(**d["regressor"])
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)


def config_hash(obj) -> str:
    text = json.dumps(obj if isinstance(obj, dict) else asdict(obj), sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _conv_bn(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1, bias=False), nn.BatchNorm2d(cout), nn.LeakyReLU(0.2))


class _Stage(nn.Module):
    """Stride-2 downsampling followed by one residual conv."""

    def __init__(self, cin, cout):
        super().__init__()
        self.down = _conv_bn(cin, cout, 2)
        self.res = nn.Sequential(nn.Conv2d(cout, cout, 3, 1, 1, bias=False), nn.BatchNorm2d(cout))
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x):
        x = self.down(x)
        return self.act(x + self.res(x))


class _StyleHead(nn.Module):
    """Reduces one pyramid level to 4x4, flattens, and emits ``n_slots`` latent rows."""

    def __init__(self, channels, size, n_slots, dim, init_scale):
        super().__init__()
        reduce = []
        while size > 4:
            reduce += [nn.Conv2d(channels, channels, 3, 2, 1), nn.LeakyReLU(0.2)]
            size //= 2
        self.reduce = nn.Sequential(*reduce)
        self.n_slots, self.dim = n_slots, dim
        self.linear = nn.Linear(channels * 16, n_slots * dim)
        with torch.no_grad():
            self.linear.weight.mul_(init_scale)
            self.linear.bias.zero_()

    def forward(self, x):
        return self.linear(self.reduce(x).flatten(1)).reshape(-1, self.n_slots, self.dim)


def _slot_groups(num_slots: int) -> list[int]:
    """Slot counts served by the coarse, middle and fine pyramid levels."""
    coarse = min(3, num_slots)
    middle = min(4, num_slots - coarse)
    return [coarse, middle, num_slots - coarse - middle]


class Encoder(nn.Module):
    """Feature-pyramid encoder with per-level style heads.

    Deep (coarse) levels feed the first W+ slots, shallower levels the later
    ones. Codes are predicted as offsets from ``latent_offset`` (the prior's
    mean latent for W+, zero for Z).
    """

    def __init__(self, in_channels: int, spec: LatentSpec, cfg: EncoderConfig, latent_offset=None):
        super().__init__()
        r = cfg.resolution
        n_stages = int(round(math.log2(r / 4))) if r > 0 else 0
        if r < 16 or 4 * 2**n_stages != r:
            raise ConfigError(f"encoder resolution must be 4 * 2^k with k >= 2, got {r}")
        self.spec = spec
        self.resolution = r
        self.in_channels = in_channels
        self.stem = _conv_bn(in_channels, cfg.stem_channels)
        widths = [cfg.stem_channels] + [min(cfg.stem_channels * 2 ** (i + 1), cfg.max_channels) for i in range(n_stages)]
        self.stages = nn.ModuleList(_Stage(widths[i], widths[i + 1]) for i in range(n_stages))
        pc = cfg.pyramid_channels
        # levels: 4x4, 8x8, 16x16 (deepest first)
        self.level_widths = widths[-1:-4:-1]
        self.lateral = nn.ModuleList(nn.Conv2d(w, pc, 1) for w in self.level_widths)
        groups = _slot_groups(spec.num_slots)
        self.heads = nn.ModuleList(
            _StyleHead(pc, 4 * 2**lvl, n, spec.dim, cfg.head_init_scale) for lvl, n in enumerate(groups) if n > 0
        )
        offset = torch.zeros(spec.shape) if latent_offset is None else latent_offset.detach().clone().float()
        if tuple(offset.shape) != spec.shape:
            raise SpecError(f"latent offset shape {tuple(offset.shape)} != {spec.shape}")
        self.register_buffer("latent_offset", offset)

    def forward(self, x):
        feats = [self.stem(x)]
        for stage in self.stages:
            feats.append(stage(feats[-1]))
        levels = feats[-1:-4:-1]
        pyramid = [self.lateral[0](levels[0])]
        for lat, lvl in zip(self.lateral[1:], levels[1:]):
            pyramid.append(lat(lvl) + F.interpolate(pyramid[-1], scale_factor=2, mode="nearest"))
        rows = [head(p) for head, p in zip(self.heads, pyramid)]
        return torch.cat(rows, dim=1) + self.latent_offset


class Regressor(nn.Module):
    """Six convolutions; BatchNorm + ReLU after all but the last, which is linear.

    With ``norm="none"`` the hidden convolutions carry a bias and no BatchNorm.
    """

    def __init__(self, feature_channels: int, out_channels: int, cfg: RegressorConfig):
        super().__init__()
        hidden = [max(1, round(c * cfg.width)) for c in REGRESSOR_CHANNELS]
        k = cfg.kernel_size
        layers = []
        cin = feature_channels
        for c in hidden:
            if cfg.norm == "batch":
                layers += [nn.Conv2d(cin, c, k, padding=k // 2, bias=False), nn.BatchNorm2d(c), nn.ReLU()]
            else:
                layers += [nn.Conv2d(cin, c, k, padding=k // 2), nn.ReLU()]
            cin = c
        self.body = nn.Sequential(*layers)
        self.out = nn.Conv2d(cin, out_channels, k, padding=k // 2)
        self.resolution = cfg.resolution
        self.feature_channels = feature_channels

    def forward(self, f):
        x = self.body(f)
        if self.resolution and x.shape[-1] != self.resolution:
            x = F.interpolate(x, size=(self.resolution, self.resolution), mode="bilinear", align_corners=False)
        return self.out(x)


def build_encoder(kind: DomainKind, spec: LatentSpec, config: EncoderConfig, mean_latent=None, seed: int = 0) -> Encoder:
    torch.manual_seed(seed)
    offset = mean_latent if spec.kind == W_PLUS else None
    return Encoder(kind.channels, spec, config, offset)


def build_regressor(kind: DomainKind, feature_channels: int, config: RegressorConfig, seed: int = 0) -> Regressor:
    if feature_channels < 1:
        raise ConfigError("feature_channels must be >= 1")
    if config.width <= 0:
        raise ConfigError("regressor width factor must be > 0")
    if config.kernel_size < 1 or config.kernel_size % 2 == 0:
        raise ConfigError(f"regressor kernel size must be odd and >= 1, got {config.kernel_size}")
    if config.norm not in ("batch", "none"):
        raise ConfigError(f"regressor norm must be 'batch' or 'none', got {config.norm!r}")
    torch.manual_seed(seed)
    return Regressor(feature_channels, kind.channels, config)


class DomainAdapter(nn.Module):
    def __init__(self, domain_id: str, kind: DomainKind, encoder: Encoder, regressor: Regressor,
                 discriminator: nn.Module | None, config: AdapterConfig, prior_fingerprint: str):
        super().__init__()
        self.domain_id = domain_id
        self.kind = kind
        self.encoder = encoder
        self.regressor = regressor
        self.discriminator = discriminator
        self.config = config
        self.prior_fingerprint = prior_fingerprint
        self.training_config_hash: str | None = None

    @property
    def config_hash(self) -> str:
        return config_hash(self.config.to_dict())

    @property
    def spec(self) -> LatentSpec:
        return self.encoder.spec

    def inference_parameters(self) -> int:
        return count_parameters(self.encoder) + count_parameters(self.regressor)


def build_adapter(domain_id: str, kind: DomainKind, prior: GeneratorPrior, config: AdapterConfig | None = None,
                  adversarial: bool = True) -> DomainAdapter:
    config = config or AdapterConfig()
    res = prior.config.resolution
    if config.encoder.resolution != res:
        config.encoder.resolution = res
    encoder = build_encoder(kind, prior.spec, config.encoder, prior.mean_latent, seed=config.seed)
    regressor = build_regressor(kind, prior.feature_shape[0], config.regressor, seed=config.seed + 1)
    disc = None
    if adversarial:
        torch.manual_seed(config.seed + 2)
        disc = ConvDiscriminator(res, 3, config.discriminator_channels, n_layers=4)
    return DomainAdapter(domain_id, kind, encoder, regressor, disc, config, prior.fingerprint)


# ---------------------------------------------------------------------------
# inference


def prepare_input(adapter: DomainAdapter, x: torch.Tensor) -> torch.Tensor:
    """Validate a (batched or single) domain image and return the encoder's float input."""
    kind = adapter.kind
    if not isinstance(x, torch.Tensor):
        x = torch.as_tensor(x)
    dtype = adapter.encoder.latent_offset.dtype
    if kind.is_categorical:
        if x.is_floating_point():
            raise DomainError(f"domain {adapter.domain_id!r} expects integer class maps")
        if x.dim() == 2:
            x = x[None]
        if x.dim() != 3:
            raise DomainError(f"class maps must be (N, H, W), got {tuple(x.shape)}")
        if x.numel() and (x.min() < 0 or x.max() >= kind.channels):
            raise DomainError(f"class index out of range for {kind}")
        x = F.one_hot(x.long(), kind.channels).permute(0, 3, 1, 2).to(dtype)
    else:
        if not x.is_floating_point():
            raise DomainError(f"domain {adapter.domain_id!r} expects continuous images")
        if x.dim() == 3:
            x = x[None]
        if x.dim() != 4 or x.shape[1] != kind.channels:
            raise DomainError(f"expected (N, {kind.channels}, H, W) input, got {tuple(x.shape)}")
        x = x.to(dtype)
    if x.shape[-1] != adapter.encoder.resolution or x.shape[-2] != adapter.encoder.resolution:
        raise DomainError(f"input is {tuple(x.shape[-2:])}, adapter expects {adapter.encoder.resolution}px")
    return x


def encode(adapter: DomainAdapter, x: torch.Tensor) -> torch.Tensor:
    """Latent codes (N, num_slots, dim) for a batch of domain images."""
    return adapter.encoder(prepare_input(adapter, x))


def regress(adapter: DomainAdapter, f: torch.Tensor) -> torch.Tensor:
    """Raw regressor output: unbounded values for continuous domains, logits for categorical ones."""
    if f.dim() == 3:
        f = f[None]
    if f.dim() != 4 or f.shape[1] != adapter.regressor.feature_channels:
        raise SpecError(f"feature map {tuple(f.shape)} does not match regressor input {adapter.regressor.feature_channels}")
    return adapter.regressor(f)


def export(kind: DomainKind, out: torch.Tensor) -> torch.Tensor:
    """Clamp continuous outputs to [-1, 1]; argmax categorical logits (ties -> lowest index)."""
    if kind.is_categorical:
        return out.argmax(dim=1)
    return out.clamp(-1, 1)


# ---------------------------------------------------------------------------
# checkpoints


def adapter_to_bytes(adapter: DomainAdapter) -> bytes:
    payload = {
        "format": ADAPTER_FORMAT,
        "domain_id": adapter.domain_id,
        "kind": adapter.kind.to_dict(),
        "config": adapter.config.to_dict(),
        "config_hash": adapter.config_hash,
        "training_config_hash": adapter.training_config_hash,
        "prior_fingerprint": adapter.prior_fingerprint,
        "latent_spec": asdict(adapter.spec),
        "encoder": adapter.encoder.state_dict(),
        "regressor": adapter.regressor.state_dict(),
        "discriminator": None if adapter.discriminator is None else adapter.discriminator.state_dict(),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    return buf.getvalue()


def save_adapter(adapter: DomainAdapter, path) -> bytes:
    data = adapter_to_bytes(adapter)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise StorageError(f"cannot write adapter checkpoint {path}: {exc}") from exc
    return data


def load_adapter_file(path) -> DomainAdapter:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise CorruptionError(f"cannot read adapter checkpoint {path}: {exc}") from exc
    return adapter_from_payload(payload, str(path))


def adapter_from_payload(payload: dict, origin: str = "<bytes>") -> DomainAdapter:
    if not isinstance(payload, dict) or payload.get("format") != ADAPTER_FORMAT:
        raise CorruptionError(f"{origin} is not an {ADAPTER_FORMAT} checkpoint")
    kind = DomainKind.from_dict(payload["kind"])
    config = AdapterConfig.from_dict(payload["config"])
    spec = LatentSpec(**payload["latent_spec"])
    encoder = Encoder(kind.channels, spec, config.encoder)
    encoder.load_state_dict(payload["encoder"])
    feat_ch = payload["regressor"]["body.0.weight"].shape[1]
    regressor = Regressor(feat_ch, kind.channels, config.regressor)
    regressor.load_state_dict(payload["regressor"])
    disc = None
    if payload.get("discriminator") is not None:
        disc = ConvDiscriminator(config.encoder.resolution, 3, config.discriminator_channels, n_layers=4)
        disc.load_state_dict(payload["discriminator"])
    adapter = DomainAdapter(payload["domain_id"], kind, encoder, regressor, disc, config, payload["prior_fingerprint"])
    adapter.training_config_hash = payload.get("training_config_hash")
    adapter.eval()
    for p in adapter.parameters():
        p.requires_grad_(False)
    return adapter
