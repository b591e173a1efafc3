"""Procedural multi-domain shape scenes, their on-disk datasets, and folder loading.

A scene is a handful of coloured shapes on a flat background. The same scene
can be rendered as an RGB picture, a class-index segmentation map, a binary
foreground mask, a soft edge map or a keypoint heat map, which gives exact
ground-truth correspondence between domains for evaluation. Training splits
draw each domain from its own seed range so no scene is seen in two domains.
"""

from __future__ import annotations

import colorsys
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .domain import DomainImage, DomainKind
from .errors import ConfigError, DataError, DomainError, DomainNotFound, StorageError

log = logging.getLogger(__name__)

DATA_FORMAT = "anchor-data/1"
SHAPE_KINDS = ("ellipse", "rectangle", "triangle")

# render target -> value model of its output
RENDER_KINDS = {
    "rgb": DomainKind.continuous(3),
    "segmentation": DomainKind.categorical(1 + len(SHAPE_KINDS)),
    "edge": DomainKind.continuous(1),
    "keypoint": DomainKind.continuous(1),
    "mask": DomainKind.categorical(2),
}

# fixed shape proportions, in units of the scene's `scale`
_ELLIPSE_MINOR = 0.6
_RECT_HALF = (0.8, 0.55)
_TRIANGLE_RADIUS = 1.15


@dataclass(frozen=True)
class Shape:
    kind: str
    center: tuple[float, float]  # (y, x), normalized to [0, 1]
    scale: float
    rotation: float
    color: tuple[float, float, float]


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    canvas: tuple[int, int]
    shapes: tuple[Shape, ...]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GenerationConfig:
    height: int = 64
    width: int = 64
    min_shapes: int = 1
    max_shapes: int = 3
    scale_range: tuple[float, float] = (0.12, 0.3)
    center_margin: float = 0.15
    background: tuple[float, float, float] = (0.1, 0.1, 0.12)
    supersample: int = 5
    keypoint_sigma: float = 1.5
    # None: hue independent of shape kind; otherwise hue is drawn from a band of
    # this width centred on a per-kind hue, so appearance carries the class
    kind_hue_spread: float | None = None

    def validate(self):
        if self.height <= 0 or self.width <= 0:
            raise ConfigError(f"canvas must be positive, got {self.height}x{self.width}")
        if not 1 <= self.min_shapes <= self.max_shapes <= 4:
            raise ConfigError(
                f"shape count bounds must satisfy 1 <= min <= max <= 4, got "
                f"[{self.min_shapes}, {self.max_shapes}]"
            )
        lo, hi = self.scale_range
        if not 0.05 <= lo <= hi <= 0.4:
            raise ConfigError(f"scale range must lie in [0.05, 0.4], got {self.scale_range}")
        if not 0 <= self.center_margin < 0.5:
            raise ConfigError("center_margin must be in [0, 0.5)")
        if self.supersample < 1 or self.supersample % 2 == 0:
            # odd so the pixel centre is one of the sub-samples
            raise ConfigError("supersample must be a positive odd integer")
        if self.kind_hue_spread is not None and not 0 < self.kind_hue_spread <= 1:
            raise ConfigError(f"kind_hue_spread must be in (0, 1], got {self.kind_hue_spread}")


def generate_scene(seed: int, config: GenerationConfig | None = None) -> SceneSpec:
    config = config or GenerationConfig()
    config.validate()
    if seed < 0:
        raise ConfigError(f"seed must be >= 0, got {seed}")
    rng = np.random.default_rng(seed)
    n = int(rng.integers(config.min_shapes, config.max_shapes + 1))
    lo, hi = config.scale_range
    m = config.center_margin
    shapes = []
    for _ in range(n):
        kind = SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
        cy, cx = rng.uniform(m, 1 - m, size=2)
        scale = rng.uniform(lo, hi)
        rotation = rng.uniform(0, 2 * np.pi)
        hue, sat, val = rng.uniform(0, 1), rng.uniform(0.55, 1), rng.uniform(0.65, 1)
        if config.kind_hue_spread is not None:
            hue = (SHAPE_KINDS.index(kind) / len(SHAPE_KINDS) + (hue - 0.5) * config.kind_hue_spread) % 1.0
        color = colorsys.hsv_to_rgb(hue, sat, val)
        shapes.append(
            Shape(
                kind,
                (float(cy), float(cx)),
                float(scale),
                float(rotation),
                tuple(float(c) for c in color),
            )
        )
    return SceneSpec(seed, (config.height, config.width), tuple(shapes))


def _ownership(scene: SceneSpec, ss: int) -> np.ndarray:
    """Index of the topmost shape covering each sub-sample, -1 for background.

    Returns (H, W, ss*ss) int array; painter's order (later shapes win).
    """
    h, w = scene.canvas
    offs = (np.arange(ss) + 0.5) / ss
    ys = (np.arange(h)[:, None] + offs[None, :]).reshape(-1)  # (h*ss,)
    xs = (np.arange(w)[:, None] + offs[None, :]).reshape(-1)
    Y, X = np.meshgrid(ys, xs, indexing="ij")
    unit = float(min(h, w))
    owner = np.full(Y.shape, -1, dtype=np.int64)
    for idx, shape in enumerate(scene.shapes):
        dy = (Y - shape.center[0] * h) / unit
        dx = (X - shape.center[1] * w) / unit
        c, s = np.cos(shape.rotation), np.sin(shape.rotation)
        u = c * dx + s * dy
        v = -s * dx + c * dy
        r = shape.scale
        if shape.kind == "ellipse":
            inside = (u / r) ** 2 + (v / (_ELLIPSE_MINOR * r)) ** 2 <= 1.0
        elif shape.kind == "rectangle":
            inside = (np.abs(u) <= _RECT_HALF[0] * r) & (np.abs(v) <= _RECT_HALF[1] * r)
        elif shape.kind == "triangle":
            inradius = 0.5 * _TRIANGLE_RADIUS * r
            inside = np.ones_like(u, dtype=bool)
            for ang in (1.5 * np.pi, np.pi / 6, 5 * np.pi / 6):
                inside &= u * np.cos(ang) + v * np.sin(ang) <= inradius
        else:
            raise ConfigError(f"unknown shape kind {shape.kind!r}")
        owner[inside] = idx
    # (h*ss, w*ss) -> (h, w, ss*ss)
    return owner.reshape(h, ss, w, ss).transpose(0, 2, 1, 3).reshape(h, w, ss * ss)


def _coverage(owner: np.ndarray, n_shapes: int) -> np.ndarray:
    """Per-pixel fraction owned by background (slot 0) and each shape (slots 1..n)."""
    counts = np.stack([(owner == k).sum(-1) for k in range(-1, n_shapes)], axis=-1)
    return counts / owner.shape[-1]


def render_domain(
    scene: SceneSpec, domain_kind: str, config: GenerationConfig | None = None
) -> DomainImage:
    """Rasterize ``scene`` into one domain.

    rgb and edge are anti-aliased by sub-sampling; segmentation and mask take
    the owner of the pixel centre so labels stay exact.
    """
    config = config or GenerationConfig()
    if domain_kind not in RENDER_KINDS:
        raise DomainError(f"unsupported domain kind {domain_kind!r}; choose from {sorted(RENDER_KINDS)}")
    kind = RENDER_KINDS[domain_kind]
    ss = config.supersample
    owner = _ownership(scene, ss)
    n = len(scene.shapes)
    h, w = scene.canvas

    if domain_kind == "rgb":
        frac = _coverage(owner, n)
        palette = np.array([config.background] + [s.color for s in scene.shapes], dtype=np.float64)
        img = frac @ palette  # (h, w, 3) in [0, 1]
        pixels = (2.0 * img - 1.0).transpose(2, 0, 1)
    elif domain_kind in ("segmentation", "mask"):
        centre = owner[:, :, (ss * ss) // 2]
        if domain_kind == "mask":
            labels = (centre >= 0).astype(np.int64)
        else:
            class_of = np.array([1 + SHAPE_KINDS.index(s.kind) for s in scene.shapes] + [0], dtype=np.int64)
            labels = class_of[centre]  # index -1 hits the trailing background entry
        return DomainImage(domain_kind, labels, kind)
    elif domain_kind == "edge":
        frac = _coverage(owner, n)
        strength = np.clip(2.0 * (1.0 - frac.max(-1)), 0.0, 1.0)
        pixels = (2.0 * strength - 1.0)[None]
    else:  # keypoint
        heat = np.zeros((h, w))
        yy, xx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
        for s in scene.shapes:
            d2 = (yy - s.center[0] * h) ** 2 + (xx - s.center[1] * w) ** 2
            heat = np.maximum(heat, np.exp(-d2 / (2 * config.keypoint_sigma**2)))
        pixels = (2.0 * heat - 1.0)[None]
    return DomainImage(domain_kind, pixels.astype(np.float32), kind)


# ---------------------------------------------------------------------------
# on-disk datasets


def to_uint8(pixels: np.ndarray, kind: DomainKind) -> np.ndarray:
    """Array ready for a lossless PNG: (H, W) or (H, W, 3) uint8."""
    if kind.is_categorical:
        if pixels.max(initial=0) > 255:
            raise DataError("categorical maps with more than 256 classes cannot be stored as PNG")
        return pixels.astype(np.uint8)
    arr = np.clip(np.round((np.clip(pixels, -1, 1) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)


def from_uint8(arr: np.ndarray, kind: DomainKind) -> np.ndarray:
    if kind.is_categorical:
        if arr.ndim == 3:
            arr = arr[..., 0]
        labels = arr.astype(np.int64)
        if labels.max(initial=0) >= kind.channels:
            raise DataError(f"class index {labels.max()} >= number of classes {kind.channels}")
        return labels
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.shape[-1] != kind.channels:
        if kind.channels == 1:
            arr = arr.mean(-1, keepdims=True)
        elif kind.channels == 3 and arr.shape[-1] == 1:
            arr = np.repeat(arr, 3, -1)
        else:
            raise DataError(f"image has {arr.shape[-1]} channels, domain expects {kind.channels}")
    return (arr.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1)


def save_png(path, pixels: np.ndarray, kind: DomainKind):
    Image.fromarray(to_uint8(np.asarray(pixels), kind)).save(path, format="PNG")


@dataclass
class DomainSpec:
    domain_id: str
    render: str  # one of RENDER_KINDS

    @property
    def kind(self) -> DomainKind:
        return RENDER_KINDS[self.render]


@dataclass
class DatasetConfig:
    root: str
    domains: list[DomainSpec] = field(
        default_factory=lambda: [DomainSpec("rgb", "rgb"), DomainSpec("seg", "segmentation")]
    )
    train_per_domain: int = 200
    eval_count: int = 50
    seed: int = 0
    # explicit {domain_id: [start, stop)} train seed ranges; derived if absent
    train_ranges: dict[str, tuple[int, int]] | None = None
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    workers: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        try:
            if "domains" in d:
                doms = []
                for item in d["domains"]:
                    if isinstance(item, str):
                        item = {"domain_id": item, "render": item}
                    doms.append(DomainSpec(item["domain_id"], item.get("render", item["domain_id"])))
                d["domains"] = doms
            if "generation" in d:
                g = dict(d["generation"])
                for key in ("scale_range", "background"):
                    if key in g:
                        g[key] = tuple(g[key])
                d["generation"] = GenerationConfig(**g)
            if d.get("train_ranges"):
                d["train_ranges"] = {k: tuple(v) for k, v in d["train_ranges"].items()}
            return cls(**d)
        except (TypeError, KeyError, ValueError, AttributeError) as exc:
            raise ConfigError(str(exc)) from exc

    def resolved_train_ranges(self) -> dict[str, tuple[int, int]]:
        if self.train_ranges:
            ranges = dict(self.train_ranges)
            missing = [d.domain_id for d in self.domains if d.domain_id not in ranges]
            if missing:
                raise ConfigError(f"train_ranges missing domains {missing}")
        else:
            base = self.seed + self.eval_count
            ranges = {
                d.domain_id: (base + i * self.train_per_domain, base + (i + 1) * self.train_per_domain)
                for i, d in enumerate(self.domains)
            }
        eval_range = (self.seed, self.seed + self.eval_count)
        items = sorted(ranges.items(), key=lambda kv: kv[1][0])
        for dom, (start, stop) in items:
            if stop - start < 1:
                raise ConfigError(f"train range of {dom!r} is empty")
            if start < eval_range[1] and eval_range[0] < stop:
                raise ConfigError(f"train range of {dom!r} overlaps the eval seeds {eval_range}")
        for (a, (s0, e0)), (b, (s1, e1)) in zip(items, items[1:]):
            if s1 < e0:
                raise ConfigError(f"train seed ranges of {a!r} and {b!r} overlap; splits must be unpaired")
        return ranges

    def validate(self):
        self.generation.validate()
        if self.train_per_domain < 1 or self.eval_count < 1:
            raise ConfigError("split sizes must be >= 1")
        ids = [d.domain_id for d in self.domains]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate domain ids {ids}")
        if not ids:
            raise ConfigError("no domains requested")
        for d in self.domains:
            if d.render not in RENDER_KINDS:
                raise ConfigError(f"unknown render kind {d.render!r}")
        self.resolved_train_ranges()


def _render_job(args):
    seed, renders, gen, out_paths = args
    scene = generate_scene(seed, gen)
    for render, path in zip(renders, out_paths):
        img = render_domain(scene, render, gen)
        save_png(path, img.pixels, img.kind)
    return seed


def build_dataset(config: DatasetConfig) -> dict:
    """Render all splits to ``config.root`` and write ``manifest.json``. Returns the manifest."""
    config.validate()
    root = Path(config.root)
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise StorageError(f"cannot write dataset root {root}: {exc}") from exc

    gen = config.generation
    ranges = config.resolved_train_ranges()
    eval_seeds = list(range(config.seed, config.seed + config.eval_count))
    jobs = []
    entries = []
    for dom in config.domains:
        start, stop = ranges[dom.domain_id]
        train_files = []
        for split, seeds in (("train", range(start, stop)), ("eval", eval_seeds)):
            (root / dom.domain_id / split).mkdir(parents=True, exist_ok=True)
        for seed in range(start, stop):
            rel = f"{dom.domain_id}/train/{seed}.png"
            train_files.append(rel)
            jobs.append((seed, (dom.render,), gen, (root / rel,)))
        entries.append(
            {
                "domain_id": dom.domain_id,
                "render": dom.render,
                "kind": dom.kind.to_dict(),
                "train_seeds": [start, stop],
                "splits": {
                    "train": train_files,
                    "eval": [f"{dom.domain_id}/eval/{s}.png" for s in eval_seeds],
                },
            }
        )
    renders = tuple(d.render for d in config.domains)
    for seed in eval_seeds:
        paths = tuple(root / f"{d.domain_id}/eval/{seed}.png" for d in config.domains)
        jobs.append((seed, renders, gen, paths))

    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            list(pool.map(_render_job, jobs, chunksize=16))
    else:
        for job in jobs:
            _render_job(job)

    manifest = {
        "format": DATA_FORMAT,
        "root": ".",
        "seed": config.seed,
        "generation": asdict(gen),
        "domains": entries,
        "pairing": [
            {"seed": s, "files": {d.domain_id: f"{d.domain_id}/eval/{s}.png" for d in config.domains}}
            for s in eval_seeds
        ],
    }
    write_json_atomic(root / "manifest.json", manifest)
    return manifest


def write_json_atomic(path, obj):
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    try:
        tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def load_manifest(root) -> dict:
    path = Path(root)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise StorageError(f"cannot read dataset manifest {path}: {exc}") from exc
    if manifest.get("format") != DATA_FORMAT:
        raise DataError(f"{path} is not an {DATA_FORMAT} manifest")
    manifest["_root"] = str(path.parent)
    return manifest


def manifest_domain(manifest: dict, domain_id: str) -> dict:
    for entry in manifest["domains"]:
        if entry["domain_id"] == domain_id:
            return entry
    raise DomainNotFound(f"domain {domain_id!r} not in dataset manifest")


# ---------------------------------------------------------------------------
# loading


class ImageSet(torch.utils.data.Dataset):
    """In-memory images of one domain.

    Continuous images are float tensors (C, H, W) in [-1, 1]; categorical
    ones are int64 (H, W) class maps.
    """

    def __init__(self, images: torch.Tensor, kind: DomainKind, domain_id: str, files=()):
        self.images = images
        self.kind = kind
        self.domain_id = domain_id
        self.files = list(files)

    def __len__(self):
        return len(self.images)

    def __getitem__(self, idx):
        return self.images[idx]

    @property
    def resolution(self) -> int:
        return int(self.images.shape[-1])

    def subset(self, indices) -> "ImageSet":
        indices = list(indices)
        files = [self.files[i] for i in indices] if self.files else []
        return ImageSet(self.images[indices], self.kind, self.domain_id, files)


def _read_image(path, kind: DomainKind, resolution: int | None) -> np.ndarray:
    with Image.open(path) as im:
        im.load()
        if kind.is_categorical:
            im = im if im.mode in ("L", "P", "I") else im.convert("L")
            if im.mode == "I":
                im = Image.fromarray(np.asarray(im).astype(np.uint8))
            resample = Image.NEAREST
        else:
            im = im.convert("RGB" if kind.channels == 3 else "L")
            resample = Image.BILINEAR
        if resolution is not None and im.size != (resolution, resolution):
            im = im.resize((resolution, resolution), resample)
        return from_uint8(np.asarray(im), kind)


def load_files(files, kind: DomainKind, domain_id: str, resolution: int | None = None) -> ImageSet:
    arrays, kept = [], []
    for f in files:
        try:
            arrays.append(_read_image(f, kind, resolution))
            kept.append(str(f))
        except (UnidentifiedImageError, OSError, SyntaxError) as exc:
            log.warning("skipping undecodable image %s: %s", f, exc)
    if not arrays:
        raise DataError(f"no decodable images for domain {domain_id!r}")
    images = torch.from_numpy(np.stack(arrays))
    return ImageSet(images, kind, domain_id, kept)


IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}


def load_folder(
    path, domain_id: str, kind: DomainKind, resolution: int | None = 64, shuffle_seed: int | None = None
) -> ImageSet:
    """Load every image file directly inside ``path``.

    Files are visited in sorted order, then permuted by ``shuffle_seed`` when given.
    """
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"{path} is not a directory")
    files = sorted(p for p in path.iterdir() if p.is_file() and not p.name.startswith("."))
    if not files:
        raise DataError(f"{path} contains no files")
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(files))
        files = [files[i] for i in order]
    return load_files(files, kind, domain_id, resolution)


def load_split(manifest: dict, domain_id: str, split: str, resolution: int | None = None) -> ImageSet:
    entry = manifest_domain(manifest, domain_id)
    root = Path(manifest["_root"])
    kind = DomainKind.from_dict(entry["kind"])
    return load_files([root / f for f in entry["splits"][split]], kind, domain_id, resolution)
