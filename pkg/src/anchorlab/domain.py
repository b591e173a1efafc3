"""Value models for visual domains and the image container shared by all modules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"


@dataclass(frozen=True)
class DomainKind:
    """How a domain's pixels are valued.

    Continuous domains carry ``channels`` real-valued planes in [-1, 1];
    categorical domains carry one class index per pixel out of ``channels``
    classes (stored as an (H, W) integer map, one-hot at encoder input).
    """

    value_model: str
    channels: int

    def __post_init__(self):
        if self.value_model == CONTINUOUS:
            if self.channels < 1:
                raise ConfigError(f"continuous domain needs >= 1 channel, got {self.channels}")
        elif self.value_model == CATEGORICAL:
            if self.channels < 2:
                raise ConfigError(f"categorical domain needs >= 2 classes, got {self.channels}")
        else:
            raise ConfigError(f"unknown value model {self.value_model!r}")

    @classmethod
    def continuous(cls, channels: int) -> "DomainKind":
        return cls(CONTINUOUS, channels)

    @classmethod
    def categorical(cls, classes: int) -> "DomainKind":
        return cls(CATEGORICAL, classes)

    @classmethod
    def parse(cls, text: str) -> "DomainKind":
        """Parse ``"continuous:3"`` / ``"categorical:4"``."""
        try:
            model, count = text.split(":")
            return cls(model.strip().lower(), int(count))
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad domain kind {text!r}; expected e.g. 'categorical:4'") from exc

    def __str__(self):
        return f"{self.value_model}:{self.channels}"

    @property
    def is_categorical(self) -> bool:
        return self.value_model == CATEGORICAL

    @property
    def num_classes(self) -> int | None:
        return self.channels if self.is_categorical else None

    def to_dict(self) -> dict:
        return {"value_model": self.value_model, "channels": self.channels}

    @classmethod
    def from_dict(cls, d: dict) -> "DomainKind":
        return cls(d["value_model"], int(d["channels"]))


@dataclass
class DomainImage:
    """One image of a domain.

    ``pixels`` is (C, H, W) float32 in [-1, 1] for continuous domains and
    (H, W) int64 class indices for categorical ones.
    """

    domain_id: str
    pixels: np.ndarray
    kind: DomainKind

    def __post_init__(self):
        validate_pixels(self.pixels, self.kind)

    @property
    def size(self) -> tuple[int, int]:
        return tuple(self.pixels.shape[-2:])


def validate_pixels(pixels, kind: DomainKind):
    """Raise DomainError unless ``pixels`` (array or tensor, optionally batched) fit ``kind``."""
    arr = np.asarray(pixels.detach().cpu() if hasattr(pixels, "detach") else pixels)
    if kind.is_categorical:
        if np.issubdtype(arr.dtype, np.floating):
            raise DomainError("categorical pixels must be integer class indices")
        if arr.size and (arr.min() < 0 or arr.max() >= kind.channels):
            raise DomainError(
                f"class index out of range [0, {kind.channels - 1}]: min={arr.min()}, max={arr.max()}"
            )
    else:
        if arr.ndim < 3 or arr.shape[-3] != kind.channels:
            raise DomainError(f"expected {kind.channels} channels, got shape {arr.shape}")
        if arr.size and (not np.isfinite(arr).all() or arr.min() < -1 or arr.max() > 1):
            raise DomainError("continuous pixels must be finite and lie in [-1, 1]")
