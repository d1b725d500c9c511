"""Manifest-backed, fully preprocessed in-memory datasets."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .chirpgen import Manifest, load_manifest
from .vit import ViTConfig, preprocess

SPLITS = ("all", "train", "val")


def is_val(index: int) -> bool:
    """Deterministic ~10% hold-out chosen by hashing the image index."""
    digest = hashlib.sha256(str(int(index)).encode()).digest()
    return digest[0] % 10 == 0


def split_positions(manifest: Manifest, split: str) -> list[int]:
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    if split == "all":
        return list(range(len(manifest)))
    want_val = split == "val"
    return [i for i, rec in enumerate(manifest.records) if is_val(rec["index"]) == want_val]


@dataclass
class Dataset:
    x: np.ndarray  # (N, C, H', W') normalised
    y: np.ndarray  # (N, 3) targets in [0, 1]
    manifest: Manifest | None = None

    def __len__(self) -> int:
        return len(self.y)

    def batches(self, batch_size: int, order=None):
        order = np.arange(len(self)) if order is None else np.asarray(order)
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            yield self.x[idx], self.y[idx]


def load_dataset(manifest, cfg: ViTConfig, split: str = "all", mean=None, std=None) -> Dataset:
    """Decode and preprocess every image of a manifest split.

    Normalisation statistics default to the manifest header's per-channel
    pixel mean/std.
    """
    if not isinstance(manifest, Manifest):
        manifest = load_manifest(manifest)
    sub = manifest.subset(split_positions(manifest, split))
    if len(sub) == 0:
        raise ValueError(f"split {split!r} of {manifest.path} is empty")
    mean = manifest.header["channel_mean"] if mean is None else mean
    std = manifest.header["channel_std"] if std is None else std
    x = np.stack([preprocess(sub.image(i), mean, std, cfg) for i in range(len(sub))])
    y = np.array([rec["y"] for rec in sub.records], dtype=np.float64)
    return Dataset(x, y, sub)
