"""Rendering domain images for human inspection (snapshot grids, side-by-side panels)."""

import math

import numpy as np
import torch
from PIL import Image

# class 0 (background) is black
PALETTE = np.array(
    [
        [0, 0, 0], [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200],
        [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60],
    ],
    dtype=np.uint8,
)


def to_display(x) -> np.ndarray:
    """(H, W, 3) uint8 view of a continuous (C, H, W) image in [-1, 1] or an integer (H, W) class map."""
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    x = np.asarray(x)
    if np.issubdtype(x.dtype, np.integer):
        return PALETTE[x % len(PALETTE)]
    arr = np.round((np.clip(x, -1, 1) + 1) * 127.5).astype(np.uint8)
    if arr.shape[0] == 1:
        arr = np.repeat(arr, 3, 0)
    elif arr.shape[0] != 3:
        arr = np.repeat(arr[:1], 3, 0)
    return arr.transpose(1, 2, 0)


def grid_image(cells, ncols: int, pad: int = 1) -> np.ndarray:
    tiles = [to_display(c) for c in cells]
    h = max(t.shape[0] for t in tiles)
    w = max(t.shape[1] for t in tiles)
    nrows = math.ceil(len(tiles) / ncols)
    canvas = np.full((nrows * (h + pad) + pad, ncols * (w + pad) + pad, 3), 255, dtype=np.uint8)
    for k, t in enumerate(tiles):
        r, c = divmod(k, ncols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        canvas[y:y + t.shape[0], x:x + t.shape[1]] = t
    return canvas


def save_grid(cells, path, ncols: int, pad: int = 1):
    Image.fromarray(grid_image(cells, ncols, pad)).save(path, format="PNG")
