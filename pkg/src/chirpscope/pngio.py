"""Deterministic PNG and CSV writers shared by the exporters."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from PIL import Image


def save_png(path, pixels) -> Path:
    """Write an (H, W, 3) or (H, W) uint8 array with no ancillary chunks."""
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        raise TypeError(f"PNG export expects uint8 pixels, got {arr.dtype}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(arr)).save(path, format="PNG", optimize=False)
    return path


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def write_matrix_csv(path, m, header=None, fmt: str = ".16e") -> Path:
    """Rows of ``m`` as comma-separated decimals; 17 significant digits by default."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header is not None:
            w.writerow(header)
        for row in np.atleast_2d(np.asarray(m, dtype=np.float64)):
            w.writerow([format(float(v), fmt) for v in row])
    return path


def read_matrix_csv(path, header: bool = False) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if header:
        rows = rows[1:]
    return np.array([[float(v) for v in r] for r in rows], dtype=np.float64)
