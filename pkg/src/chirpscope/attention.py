"""Per-head attention maps: extraction, normalisation and overlays."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import colormaps
from .chirpgen import pixel_patch_index
from .pngio import save_png, write_matrix_csv
from .vit import Checkpoint, forward, preprocess

REDUCTIONS = ("column", "row")


def extract_maps(attn, grid_p: int | None = None, reduce: str = "column") -> np.ndarray:
    """Aggregate (..., T, T) attention to (..., P, P) patch maps.

    The CLS row and column are dropped.  ``column`` averages over query rows,
    giving the attention each patch *receives*; ``row`` averages over keys.
    """
    a = np.asarray(attn, dtype=np.float64)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"attention must end in a square (T, T) block, got {a.shape}")
    n = a.shape[-1] - 1
    p = int(round(np.sqrt(n))) if grid_p is None else int(grid_p)
    if p * p != n:
        raise ValueError(f"{n} patch tokens do not form a {p}x{p} grid")
    if reduce not in REDUCTIONS:
        raise ValueError(f"reduce must be one of {REDUCTIONS}")
    inner = a[..., 1:, 1:]
    m = inner.mean(axis=-2) if reduce == "column" else inner.mean(axis=-1)
    return m.reshape(*a.shape[:-2], p, p)


def normalize_map(m) -> np.ndarray:
    """Min-max rescale to [0, 1]; a constant map becomes all zeros."""
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise ValueError("map contains non-finite values")
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def upsample_nearest(m, height: int, width: int) -> np.ndarray:
    """Each pixel takes the value of the patch that contains its centre."""
    m = np.asarray(m)
    rows = pixel_patch_index(height, m.shape[0])
    cols = pixel_patch_index(width, m.shape[1])
    return m[rows[:, None], cols[None, :]]


def overlay(img, m, alpha: float = 0.5, colormap: str = "jet") -> np.ndarray:
    """Blend ``(1 - alpha) * image + alpha * colormap(map)`` per pixel and channel."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    pixels = np.asarray(getattr(img, "pixels", img))
    if pixels.dtype != np.uint8 or pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError("overlay expects an (H, W, 3) uint8 image")
    if alpha == 0.0:
        return pixels.copy()
    h, w = pixels.shape[:2]
    heat = colormaps.apply_lut(upsample_nearest(m, h, w), colormaps.get(colormap)).astype(np.float64)
    out = (1.0 - alpha) * pixels.astype(np.float64) + alpha * heat
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def head_maps(ckpt: Checkpoint, image, reduce: str = "column") -> np.ndarray:
    """(L, H, P, P) maps of one uint8 image under ``ckpt``."""
    x = preprocess(image, ckpt.mean, ckpt.std, ckpt.cfg)
    _, attn = forward(x[None], ckpt.params, ckpt.cfg)
    return extract_maps(attn[0], ckpt.cfg.grid_p, reduce)


def dump_all(ckpt: Checkpoint, image, out_dir, alpha: float = 0.5, colormap: str = "jet", reduce: str = "column") -> list[Path]:
    """Write ``layer{l}_head{h}.png`` overlays and ``.csv`` raw maps for every head."""
    out_dir = Path(out_dir)
    maps = head_maps(ckpt, image, reduce)
    written = []
    for l in range(maps.shape[0]):
        for h in range(maps.shape[1]):
            stem = f"layer{l}_head{h}"
            written.append(save_png(out_dir / f"{stem}.png", overlay(image, normalize_map(maps[l, h]), alpha, colormap)))
            written.append(write_matrix_csv(out_dir / f"{stem}.csv", maps[l, h]))
    return written
