"""Evaluation metrics and the finite-difference gradient oracle.

FID and KID here are *proxies*: embeddings come from a small frozen CNN
trained in-repo to count and classify shapes in synthetic RGB scenes, not
from an Inception network. The same extractor serves as the perceptual
distance for continuous-domain correspondence.
"""

from __future__ import annotations

import io
import json
import math
import pickle
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import uniform_filter
from torch import nn

from .data import SHAPE_KINDS, GenerationConfig, generate_scene, render_domain
from .domain import DomainKind
from .errors import ContractError, CorruptionError, NumericalError, StorageError

EXTRACTOR_FORMAT = "anchor-extractor/1"
PROXY_NOTE = "proxy metrics: FID/KID/perceptual distances use the in-repo synthetic-shape extractor, not Inception/LPIPS"


class FeatureExtractor(nn.Module):
    """Conv embedding net with two training heads (shape count, kinds present)."""

    def __init__(self, resolution: int = 64, dim: int = 64):
        super().__init__()
        self.resolution = resolution
        self.dim = dim
        self.body = nn.Sequential(
            nn.Conv2d(3, 32, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(32, 64, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(64, dim, 3, 2, 1), nn.LeakyReLU(0.2),
        )
        self.count_head = nn.Linear(dim, 4)
        self.kind_head = nn.Linear(dim, len(SHAPE_KINDS))

    def forward(self, x):
        return self.body(x).mean(dim=(2, 3))


def _extractor_training_set(n: int, resolution: int, seed: int):
    gen = GenerationConfig(height=resolution, width=resolution, min_shapes=1, max_shapes=4)
    images, counts, kinds = [], [], []
    for s in range(seed, seed + n):
        scene = generate_scene(s, gen)
        images.append(render_domain(scene, "rgb", gen).pixels)
        counts.append(len(scene.shapes) - 1)
        kinds.append([float(any(sh.kind == k for sh in scene.shapes)) for k in SHAPE_KINDS])
    return torch.from_numpy(np.stack(images)), torch.tensor(counts), torch.tensor(kinds)


def train_extractor(resolution: int = 64, steps: int = 400, n_images: int = 2000, batch_size: int = 32,
                    seed: int = 10_000_000, dim: int = 64) -> FeatureExtractor:
    """Deterministically train and freeze the embedding network.

    Training scenes come from a reserved seed range far from dataset seeds.
    """
    torch.manual_seed(seed % (2**31))
    images, counts, kinds = _extractor_training_set(n_images, resolution, seed)
    net = FeatureExtractor(resolution, dim)
    opt = torch.optim.Adam(net.parameters(), lr=2e-3)
    gen = torch.Generator().manual_seed(seed % (2**31))
    for _ in range(steps):
        idx = torch.randint(n_images, (batch_size,), generator=gen)
        emb = net(images[idx])
        loss = F.cross_entropy(net.count_head(emb), counts[idx]) + \
            F.binary_cross_entropy_with_logits(net.kind_head(emb), kinds[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def save_extractor(net: FeatureExtractor, path):
    buf = io.BytesIO()
    torch.save({"format": EXTRACTOR_FORMAT, "resolution": net.resolution, "dim": net.dim,
                "state_dict": net.state_dict()}, buf)
    try:
        Path(path).write_bytes(buf.getvalue())
    except OSError as exc:
        raise StorageError(f"cannot write extractor {path}: {exc}") from exc


def load_extractor(path) -> FeatureExtractor:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise CorruptionError(f"cannot read extractor {path}: {exc}") from exc
    if payload.get("format") != EXTRACTOR_FORMAT:
        raise CorruptionError(f"{path} is not an {EXTRACTOR_FORMAT} checkpoint")
    net = FeatureExtractor(payload["resolution"], payload["dim"])
    net.load_state_dict(payload["state_dict"])
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


@torch.no_grad()
def embed(net: FeatureExtractor, images: torch.Tensor, batch_size: int = 100) -> np.ndarray:
    """(N, d) float64 embeddings of continuous images in [-1, 1]; 1-channel inputs are replicated to RGB."""
    if images.dim() == 3:
        images = images[None]
    if images.shape[1] == 1:
        images = images.expand(-1, 3, -1, -1)
    if images.shape[1] != 3:
        raise ContractError(f"extractor takes 1 or 3 channel images, got {images.shape[1]}")
    out = [net(images[i:i + batch_size].float()).double() for i in range(0, len(images), batch_size)]
    return torch.cat(out).numpy()


# ---------------------------------------------------------------------------
# distributional distances


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    @classmethod
    def from_embeddings(cls, emb: np.ndarray) -> "GaussianStats":
        emb = np.asarray(emb, dtype=np.float64)
        if emb.ndim != 2 or len(emb) < 2:
            raise ContractError("Gaussian statistics need at least two embeddings")
        return cls(emb.mean(0), np.cov(emb, rowvar=False), len(emb))


def _psd_sqrt(mat: np.ndarray, tol: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    if vals.min(initial=0.0) < -tol:
        raise NumericalError(f"matrix is not positive semidefinite (eigenvalue {vals.min():.3g})")
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def fid_proxy(a: GaussianStats, b: GaussianStats, tol: float = 1e-6) -> float:
    """Frechet distance between two embedding Gaussians.

    tr((S_a S_b)^1/2) is taken as tr((S_a^1/2 S_b S_a^1/2)^1/2), which is
    symmetric PSD and so admits an eigendecomposition; eigenvalues down to
    -tol are treated as zero.
    """
    if a.mean.shape != b.mean.shape:
        raise ContractError(f"embedding dims differ: {a.mean.shape} vs {b.mean.shape}")
    sa = _psd_sqrt(np.atleast_2d(a.cov), tol)
    inner = sa @ np.atleast_2d(b.cov) @ sa
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    if vals.min(initial=0.0) < -tol:
        raise NumericalError(f"covariance product has eigenvalue {vals.min():.3g} below tolerance")
    tr_sqrt = np.sqrt(np.clip(vals, 0, None)).sum()
    diff = a.mean - b.mean
    return float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2 * tr_sqrt)


def _poly_kernel(x, y):
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def _mmd2_unbiased(x, y) -> float:
    m, n = len(x), len(y)
    kxx, kyy, kxy = _poly_kernel(x, x), _poly_kernel(y, y), _poly_kernel(x, y)
    return float(
        (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
        + (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
        - 2 * kxy.mean()
    )


def kid_proxy(emb_a: np.ndarray, emb_b: np.ndarray, block_size: int = 1000) -> float:
    """Unbiased MMD^2 with kernel (x.y/d + 1)^3, averaged over blocks.

    Rows are put into a canonical (lexicographic) order before blocking, so
    the result does not depend on sample order.
    """
    a = np.asarray(emb_a, dtype=np.float64)
    b = np.asarray(emb_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ContractError("KID needs at least two embeddings per side")
    if a.shape[1] != b.shape[1]:
        raise ContractError("embedding dims differ")
    a = a[np.lexsort(a.T[::-1])]
    b = b[np.lexsort(b.T[::-1])]
    n_blocks = max(1, min(len(a), len(b)) // block_size)
    return float(np.mean([_mmd2_unbiased(a[i::n_blocks], b[i::n_blocks]) for i in range(n_blocks)]))


# ---------------------------------------------------------------------------
# structural similarity


def ssim(x, y, win_size: int = 7, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM of continuous images in [-1, 1], computed on the [0, 1] remap.

    Uniform window, sample covariances, border of (win_size - 1) // 2 pixels
    excluded; the mean runs over channels and batch items.
    """
    x = np.asarray(x.detach().cpu() if hasattr(x, "detach") else x, dtype=np.float64)
    y = np.asarray(y.detach().cpu() if hasattr(y, "detach") else y, dtype=np.float64)
    if x.shape != y.shape:
        raise ContractError(f"ssim shapes differ: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[None], y[None]
    x = (x + 1) / 2
    y = (y + 1) / 2
    planes_x = x.reshape(-1, *x.shape[-2:])
    planes_y = y.reshape(-1, *y.shape[-2:])
    c1, c2 = k1**2, k2**2
    np_ = win_size**2
    cov_norm = np_ / (np_ - 1)
    pad = (win_size - 1) // 2
    vals = []
    for px, py in zip(planes_x, planes_y):
        ux = uniform_filter(px, win_size)
        uy = uniform_filter(py, win_size)
        vx = cov_norm * (uniform_filter(px * px, win_size) - ux * ux)
        vy = cov_norm * (uniform_filter(py * py, win_size) - uy * uy)
        vxy = cov_norm * (uniform_filter(px * py, win_size) - ux * uy)
        s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux**2 + uy**2 + c1) * (vx + vy + c2))
        vals.append(s[pad:s.shape[0] - pad, pad:s.shape[1] - pad].mean())
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# correspondence against paired ground truth


def confusion_matrix(pred, target, num_classes: int) -> np.ndarray:
    p = np.asarray(pred.cpu() if hasattr(pred, "cpu") else pred).reshape(-1).astype(np.int64)
    t = np.asarray(target.cpu() if hasattr(target, "cpu") else target).reshape(-1).astype(np.int64)
    if p.shape != t.shape:
        raise ContractError("prediction and target sizes differ")
    return np.bincount(t * num_classes + p, minlength=num_classes**2).reshape(num_classes, num_classes)


def mean_iou(pred, target, num_classes: int) -> float:
    """Class-wise IoU from the pooled confusion matrix, averaged over classes
    present in either prediction or target."""
    conf = confusion_matrix(pred, target, num_classes)
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(0) + conf.sum(1) - inter
    present = union > 0
    if not present.any():
        return 1.0
    return float((inter[present] / union[present]).mean())


def per_image_iou(pred, target, num_classes: int) -> np.ndarray:
    return np.array([mean_iou(p, t, num_classes) for p, t in zip(pred, target)])


def correspondence(prediction, target, kind: DomainKind, extractor: FeatureExtractor | None = None) -> dict:
    """Paired agreement: mean IoU for categorical domains; pixel MSE and
    extractor-embedding distance for continuous ones."""
    if kind.is_categorical:
        if torch.is_tensor(prediction) and prediction.is_floating_point():
            raise ContractError("categorical correspondence needs class-index predictions")
        return {"iou": mean_iou(prediction, target, kind.channels)}
    if torch.is_tensor(prediction) and not prediction.is_floating_point():
        raise ContractError("continuous correspondence needs real-valued predictions")
    pred = torch.as_tensor(prediction, dtype=torch.float64)
    tgt = torch.as_tensor(target, dtype=torch.float64)
    if pred.shape != tgt.shape:
        raise ContractError("prediction and target shapes differ")
    out = {"mse": float(((pred - tgt) ** 2).mean())}
    if extractor is not None:
        if pred.dim() == 3:
            pred, tgt = pred[None], tgt[None]
        ea, eb = embed(extractor, pred), embed(extractor, tgt)
        out["perceptual"] = float(np.linalg.norm(ea - eb, axis=1).mean())
    return out


# ---------------------------------------------------------------------------
# gradient oracle


def finite_difference_check(fn, parameters, epsilon: float = 1e-5, max_coords: int | None = None,
                            seed: int = 0) -> float:
    """Largest relative error between autograd and central-difference gradients.

    ``fn`` maps the current values of ``parameters`` (tensors, ideally float64)
    to a scalar. Relative error is |g_fd - g| / (|g_fd| + |g| + 1e-12). With
    ``max_coords`` only that many seeded coordinates per tensor are probed.
    """
    params = list(parameters)
    for p in params:
        p.requires_grad_(True)
    value = fn()
    if not torch.isfinite(value):
        raise NumericalError("function value is not finite")
    grads = torch.autograd.grad(value, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat, gflat = p.view(-1), g.reshape(-1)
            coords = np.arange(flat.numel())
            if max_coords is not None and flat.numel() > max_coords:
                coords = np.sort(rng.choice(flat.numel(), max_coords, replace=False))
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + epsilon
                f_plus = fn().item()
                flat[i] = orig - epsilon
                f_minus = fn().item()
                flat[i] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise NumericalError("non-finite function value during finite differencing")
                g_fd = (f_plus - f_minus) / (2 * epsilon)
                g_an = gflat[i].item()
                worst = max(worst, abs(g_fd - g_an) / (abs(g_fd) + abs(g_an) + 1e-12))
    return worst


# ---------------------------------------------------------------------------
# reports


def format_report(rows: list[dict], config_hash: str, title: str = "evaluation") -> str:
    """Plain-text table: metric, value, N, config hash, under a proxy-status header."""
    lines = [f"# {title}", f"# {PROXY_NOTE}", f"{'metric':<32} {'value':>14} {'N':>6}  config"]
    for row in rows:
        lines.append(f"{row['metric']:<32} {row['value']:>14.6f} {row['n']:>6d}  {config_hash}")
    return "\n".join(lines) + "\n"


def report_json(rows: list[dict], config_hash: str) -> str:
    return json.dumps({"note": PROXY_NOTE, "config_hash": config_hash, "rows": rows}, indent=2, sort_keys=True)
