"""Scores how concentrated each head's attention is on the chirp or on plot furniture."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .attention import extract_maps, normalize_map, overlay
from .chirpgen import DISTRACTORS, ChirpSpec, PlotGeometry, chirp_patch_mask, pixel_patch_index
from .dataset import Dataset
from .pngio import save_png
from .vit import Checkpoint, forward

EDGES = ("top_edge", "bottom_edge", "left_edge", "right_edge")
CORNERS = ("top_left_corner", "top_right_corner", "bottom_left_corner", "bottom_right_corner")
# disjoint regions whose concentrations sum to one
PARTITION = ("chirp",) + DISTRACTORS + ("background",)
# candidates for a monosemantic_distractor label
DISTRACTOR_REGIONS = DISTRACTORS + EDGES + CORNERS
REGIONS = PARTITION + EDGES + CORNERS

TASK = "monosemantic_task"
DISTRACTOR = "monosemantic_distractor"
POLY = "polysemantic"


def concentration(m, mask) -> float:
    """Share of the map's mass that falls inside ``mask``."""
    m = np.asarray(m, dtype=np.float64)
    total = m.sum()
    if not total > 0:
        raise ValueError("map has no positive mass")
    return float(m[np.asarray(mask, dtype=bool)].sum() / total)


def pixel_labels(geometry: PlotGeometry) -> tuple[np.ndarray, tuple[str, ...]]:
    """Canvas-sized integer image: 0 unlabelled, 1 data area, 2.. the distractor bands."""
    names = ("none", "data") + DISTRACTORS
    h, w = geometry.canvas
    lab = np.zeros((h, w), dtype=np.int64)
    rects = [geometry.data_rect] + [geometry.distractors()[n] for n in DISTRACTORS]
    for code, r in enumerate(rects, start=1):
        lab[max(r.y0, 0) : min(r.y1, h), max(r.x0, 0) : min(r.x1, w)] = code
    return lab, names


def patch_owner(geometry: PlotGeometry, grid_p: int) -> tuple[np.ndarray, tuple[str, ...]]:
    """Label code owning each patch by plurality of its pixels; ties go to the lower code."""
    lab, names = pixel_labels(geometry)
    h, w = lab.shape
    rows = pixel_patch_index(h, grid_p)
    cols = pixel_patch_index(w, grid_p)
    patch = rows[:, None] * grid_p + cols[None, :]
    counts = np.zeros((grid_p * grid_p, len(names)), dtype=np.int64)
    np.add.at(counts, (patch.ravel(), lab.ravel()), 1)
    return counts.argmax(axis=1).reshape(grid_p, grid_p), names


@dataclass
class RegionMaskSet:
    masks: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.masks[name]

    def partition(self) -> list[np.ndarray]:
        return [self.masks[n] for n in PARTITION]


def _border(data: np.ndarray) -> dict[str, np.ndarray]:
    out = {n: np.zeros_like(data) for n in EDGES + CORNERS}
    if not data.any():
        return out
    rows = np.nonzero(data.any(axis=1))[0]
    cols = np.nonzero(data.any(axis=0))[0]
    r0, r1, c0, c1 = rows[0], rows[-1], cols[0], cols[-1]
    out["top_edge"][r0, c0 : c1 + 1] = True
    out["bottom_edge"][r1, c0 : c1 + 1] = True
    out["left_edge"][r0 : r1 + 1, c0] = True
    out["right_edge"][r0 : r1 + 1, c1] = True
    out["top_left_corner"][r0 : r0 + 2, c0 : c0 + 2] = True
    out["top_right_corner"][r0 : r0 + 2, max(c1 - 1, c0) : c1 + 1] = True
    out["bottom_left_corner"][max(r1 - 1, r0) : r1 + 1, c0 : c0 + 2] = True
    out["bottom_right_corner"][max(r1 - 1, r0) : r1 + 1, max(c1 - 1, c0) : c1 + 1] = True
    return {k: v & data for k, v in out.items()}


def region_masks(geometry: PlotGeometry, spec: ChirpSpec, grid_p: int, half_width: int = 2) -> RegionMaskSet:
    """P x P masks for the chirp, each distractor band, the data border and the background.

    Distractor bands own the patches where they hold the plurality of pixels
    and give up any patch the chirp touches, so the PARTITION masks are
    disjoint and cover the grid.
    """
    owner, names = patch_owner(geometry, grid_p)
    chirp = chirp_patch_mask(spec, geometry, grid_p, half_width)
    masks = {"chirp": chirp}
    for n in DISTRACTORS:
        masks[n] = (owner == names.index(n)) & ~chirp
    taken = np.logical_or.reduce([masks[n] for n in ("chirp",) + DISTRACTORS])
    masks["background"] = ~taken
    masks.update(_border(owner == names.index("data")))
    return RegionMaskSet(masks)


def entropy(p) -> float:
    """Shannon entropy in nats of a nonnegative array scaled to unit mass."""
    p = np.asarray(p, dtype=np.float64).ravel()
    p = p / p.sum()
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def decide(means: dict[str, float], tau: float) -> tuple[str, str | None]:
    """Label rule: chirp share >= tau, else the strongest distractor share >= tau, else polysemantic."""
    if means["chirp"] >= tau:
        return TASK, None
    best = max(DISTRACTOR_REGIONS, key=lambda n: (means[n], -DISTRACTOR_REGIONS.index(n)))
    if means[best] >= tau:
        return DISTRACTOR, best
    return POLY, None


@dataclass
class HeadProfile:
    layer: int
    head: int
    label: str
    region: str | None
    region_means: dict[str, float]
    entropy: float
    confidence: float
    representative: int = -1
    chirp_concentrations: np.ndarray = field(default=None, repr=False)

    @property
    def tag(self) -> str:
        return f"{self.label}-{self.region}" if self.region else self.label

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "head": self.head,
            "label": self.label,
            "region": self.region,
            "tag": self.tag,
            "region_means": {k: float(v) for k, v in self.region_means.items()},
            "entropy": self.entropy,
            "confidence": self.confidence,
            "representative": self.representative,
        }


def median_index(values) -> int:
    """Position of the lower-median value under a stable sort."""
    order = np.argsort(np.asarray(values), kind="stable")
    return int(order[(len(order) - 1) // 2])


def score_maps(maps, mask_sets: Sequence[RegionMaskSet], tau: float = 0.6) -> list[HeadProfile]:
    """Profiles from (N, L, H, P, P) maps and one mask set per item."""
    if not 0.5 < tau < 1.0:
        raise ValueError(f"tau must lie in (0.5, 1), got {tau}")
    maps = np.asarray(maps, dtype=np.float64)
    N, L, H = maps.shape[:3]
    if N == 0 or len(mask_sets) != N:
        raise ValueError("need one mask set per map and at least one item")
    # (N, R, P, P) stacked region masks
    stack = np.array([[ms[n] for n in REGIONS] for ms in mask_sets], dtype=np.float64)
    mass = maps.sum(axis=(-2, -1))
    if np.any(mass <= 0):
        raise ValueError("map has no positive mass")
    conc = np.einsum("nlhij,nrij->nlhr", maps, stack) / mass[..., None]
    profiles = []
    for l in range(L):
        for h in range(H):
            per = conc[:, l, h]
            means = dict(zip(REGIONS, per.mean(axis=0)))
            label, region = decide(means, tau)
            agree = [decide(dict(zip(REGIONS, row)), tau) == (label, region) for row in per]
            mean_map = (maps[:, l, h] / mass[:, l, h, None, None]).mean(axis=0)
            chirp = per[:, REGIONS.index("chirp")]
            profiles.append(
                HeadProfile(
                    l, h, label, region, {k: float(v) for k, v in means.items()},
                    entropy(mean_map), float(np.mean(agree)), median_index(chirp), chirp,
                )
            )
    return profiles


AttentionSource = Callable[[np.ndarray], np.ndarray]


def collect_maps(source, data: Dataset, grid_p: int, batch_size: int = 32) -> np.ndarray:
    """(N, L, H, P, P) column-mean maps from a checkpoint or an attention callable.

    A callable receives an array of item positions and returns (B, L, H, T, T).
    """
    if isinstance(source, Checkpoint):
        def source_fn(pos, ck=source):
            return forward(data.x[pos], ck.params, ck.cfg)[1]
    else:
        source_fn = source
    out = []
    for s in range(0, len(data), batch_size):
        pos = np.arange(s, min(s + batch_size, len(data)))
        out.append(extract_maps(source_fn(pos), grid_p))
    return np.concatenate(out, axis=0)


def dataset_masks(data: Dataset, grid_p: int) -> list[RegionMaskSet]:
    m = data.manifest
    if m is None:
        raise ValueError("scoring needs a dataset that carries its manifest")
    return [region_masks(m.geometry(i), m.spec(i), grid_p) for i in range(len(m))]


def profile_heads(source, data: Dataset, tau: float = 0.6, grid_p: int | None = None, batch_size: int = 32):
    """Label every head; ``source`` is a Checkpoint or an attention callable."""
    if grid_p is None:
        if not isinstance(source, Checkpoint):
            raise ValueError("grid_p is required with an attention callable")
        grid_p = source.cfg.grid_p
    maps = collect_maps(source, data, grid_p, batch_size)
    return score_maps(maps, dataset_masks(data, grid_p), tau), maps


def _tile(images: list[np.ndarray], gap: int = 4) -> np.ndarray:
    h = max(im.shape[0] for im in images)
    parts = []
    for i, im in enumerate(images):
        pad = np.full((h, im.shape[1], 3), 255, np.uint8)
        pad[: im.shape[0]] = im
        parts.append(pad)
        if i + 1 < len(images):
            parts.append(np.full((h, gap, 3), 255, np.uint8))
    return np.concatenate(parts, axis=1)


def export_profiles(profiles: list[HeadProfile], maps, data: Dataset, out_dir, alpha: float = 0.5, top_k: int = 4) -> list[Path]:
    """profiles.json, one representative overlay per head, and the two summary figures."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    path = out_dir / "profiles.json"
    path.write_text(json.dumps([p.to_dict() for p in profiles], indent=1, sort_keys=True) + "\n")
    written.append(path)
    overlays = {}
    for p in profiles:
        img = data.manifest.image(p.representative)
        ov = overlay(img, normalize_map(maps[p.representative, p.layer, p.head]), alpha)
        overlays[(p.layer, p.head)] = ov
        written.append(save_png(out_dir / "gallery" / f"layer{p.layer}_head{p.head}_{p.tag}.png", ov))
    ranked = sorted(profiles, key=lambda p: (-p.region_means["chirp"], p.layer, p.head))
    mono = [overlays[(p.layer, p.head)] for p in ranked[:top_k]]
    written.append(save_png(out_dir / "fig_monosemantic.png", _tile(mono)))
    poly = max(profiles, key=lambda p: (p.entropy, -p.layer, -p.head))
    written.append(save_png(out_dir / "fig_polysemantic.png", overlays[(poly.layer, poly.head)]))
    return written
