"""256-entry RGB lookup tables used for spectrograms, overlays and heatmaps."""

from __future__ import annotations

from functools import lru_cache
from importlib import resources

import numpy as np

LUMA = np.array([0.299, 0.587, 0.114])


@lru_cache(maxsize=None)
def viridis() -> np.ndarray:
    """Viridis-like table (256×3 uint8) with strictly increasing luminance."""
    text = resources.files("chirpscope").joinpath("data/viridis.csv").read_text()
    lut = np.loadtxt(text.splitlines()[1:], delimiter=",", dtype=np.int64)
    lut = lut.astype(np.uint8)
    lut.flags.writeable = False
    return lut


@lru_cache(maxsize=None)
def jet() -> np.ndarray:
    x = np.linspace(0.0, 1.0, 256)
    rgb = np.stack(
        [
            np.clip(1.5 - np.abs(4.0 * x - 3.0), 0, 1),
            np.clip(1.5 - np.abs(4.0 * x - 2.0), 0, 1),
            np.clip(1.5 - np.abs(4.0 * x - 1.0), 0, 1),
        ],
        axis=1,
    )
    lut = np.round(rgb * 255).astype(np.uint8)
    lut.flags.writeable = False
    return lut


@lru_cache(maxsize=None)
def blue_red() -> np.ndarray:
    """Diverging blue -> white -> red table; low values cool, high values warm."""
    x = np.linspace(0.0, 1.0, 256)
    blue = np.array([59.0, 76.0, 192.0])
    white = np.array([242.0, 242.0, 242.0])
    red = np.array([180.0, 4.0, 38.0])
    lo = np.clip(x * 2.0, 0, 1)[:, None]
    hi = np.clip(x * 2.0 - 1.0, 0, 1)[:, None]
    rgb = np.where(x[:, None] <= 0.5, blue + (white - blue) * lo, white + (red - white) * hi)
    lut = np.round(rgb).astype(np.uint8)
    lut.flags.writeable = False
    return lut


def get(name: str) -> np.ndarray:
    tables = {"viridis": viridis, "jet": jet, "blue_red": blue_red}
    try:
        return tables[name]()
    except KeyError:
        raise ValueError(f"unknown colormap {name!r}; choose from {sorted(tables)}") from None


def apply_lut(values: np.ndarray, lut: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to RGB through ``lut`` (nearest entry)."""
    idx = np.clip(np.round(np.asarray(values, dtype=np.float64) * (len(lut) - 1)), 0, len(lut) - 1)
    return lut[idx.astype(np.intp)]
