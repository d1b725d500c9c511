"""Single-head ablation sweeps, prediction histograms and their exports."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import colormaps
from .dataset import Dataset
from .pngio import save_png, write_matrix_csv
from .train import evaluate, predict
from .vit import Checkpoint, ViTConfig


@dataclass
class AblationReport:
    baseline_loss: float
    loss: np.ndarray  # (L, H)
    pct_increase: np.ndarray  # (L, H)

    @property
    def mu(self) -> np.ndarray:
        return self.pct_increase.mean(axis=1)

    @property
    def sigma(self) -> np.ndarray:
        # population std over the heads of a layer
        return self.pct_increase.std(axis=1, ddof=0)

    def summary_label(self, layer: int) -> str:
        return format_mu_sigma(self.mu[layer], self.sigma[layer])


def format_mu_sigma(mu: float, sigma: float, digits: int = 2) -> str:
    return f"(μ={mu:.{digits}f}%, σ={sigma:.{digits}f}%)"


def pct_increase(loss, baseline: float) -> np.ndarray:
    if baseline <= 0:
        raise ValueError("baseline loss must be positive to express a percent increase")
    return 100.0 * (np.asarray(loss, dtype=np.float64) - baseline) / baseline


def _check_head(cfg: ViTConfig, layer: int, head: int) -> None:
    if not (0 <= layer < cfg.layers and 0 <= head < cfg.heads):
        raise IndexError(f"head ({layer}, {head}) outside a {cfg.layers}x{cfg.heads} model")


def ablate_weights(params: Mapping[str, np.ndarray], cfg: ViTConfig, layer: int, head: int) -> dict[str, np.ndarray]:
    """Copy of ``params`` with head ``head`` of ``layer`` removed.

    Zeroes that head's output columns of W_Q, W_K and W_V, and the matching
    columns of the LoRA ``B`` factors so the folded adapter contributes
    nothing either.  Inputs are left untouched.
    """
    _check_head(cfg, layer, head)
    cols = slice(head * cfg.head_dim, (head + 1) * cfg.head_dim)
    out = dict(params)
    for key in ("Wq", "Wk", "Wv", "lora_Bq", "lora_Bv"):
        name = f"layer{layer}.{key}"
        w = np.array(params[name], dtype=np.float64)
        w[:, cols] = 0.0
        out[name] = w
    return out


def head_mask(cfg: ViTConfig, layer: int, head: int) -> np.ndarray:
    _check_head(cfg, layer, head)
    m = np.zeros((cfg.layers, cfg.heads), dtype=bool)
    m[layer, head] = True
    return m


def sweep(ckpt: Checkpoint, data: Dataset, batch_size: int = 32, workers: int = 1) -> AblationReport:
    """Baseline plus every single-head ablation, reduced in (layer, head) order."""
    if len(data) == 0:
        raise ValueError("cannot sweep an empty dataset")
    cfg = ckpt.cfg
    baseline = evaluate(ckpt, data, batch_size=batch_size)
    jobs = [(l, h) for l in range(cfg.layers) for h in range(cfg.heads)]

    def run(job):
        return evaluate((ablate_weights(ckpt.params, cfg, *job), cfg), data, batch_size=batch_size)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            losses = list(pool.map(run, jobs))
    else:
        losses = [run(j) for j in jobs]
    loss = np.array(losses, dtype=np.float64).reshape(cfg.layers, cfg.heads)
    return AblationReport(baseline, loss, pct_increase(loss, baseline))


@dataclass
class HistogramSet:
    edges: np.ndarray  # (bins + 1,)
    baseline: np.ndarray  # (bins,)
    counts: np.ndarray  # (L, H, bins)


def shared_edges(values, bins: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """Bin edges spanning [lo, hi] widened to cover every value."""
    v = np.concatenate([np.ravel(x) for x in values]) if len(values) else np.zeros(0)
    if v.size:
        lo, hi = min(lo, float(v.min())), max(hi, float(v.max()))
    return np.linspace(lo, hi, bins + 1)


def histograms_from_predictions(baseline, ablated, bins: int = 20, edges=None) -> HistogramSet:
    """Start-time histograms (component 0) over one shared binning.

    ``ablated`` is an (L, H) nested sequence of (N, 3) prediction arrays.
    """
    if bins < 2:
        raise ValueError("need at least 2 bins")
    base = np.asarray(baseline, dtype=np.float64)[:, 0]
    grid = [[np.asarray(p, dtype=np.float64)[:, 0] for p in row] for row in ablated]
    if edges is None:
        edges = shared_edges([base] + [p for row in grid for p in row], bins)
    edges = np.asarray(edges, dtype=np.float64)
    counts = np.array([[np.histogram(p, edges)[0] for p in row] for row in grid], dtype=np.int64)
    return HistogramSet(edges, np.histogram(base, edges)[0].astype(np.int64), counts)


def prediction_histograms(ckpt: Checkpoint, data: Dataset, bins: int = 20, batch_size: int = 32) -> HistogramSet:
    cfg = ckpt.cfg
    base = predict(ckpt.params, cfg, data.x, batch_size=batch_size)
    ablated = [
        [predict(ablate_weights(ckpt.params, cfg, l, h), cfg, data.x, batch_size=batch_size) for h in range(cfg.heads)]
        for l in range(cfg.layers)
    ]
    return histograms_from_predictions(base, ablated, bins)


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------


def heatmap_pixels(matrix, cell: int = 32, colormap: str = "blue_red") -> np.ndarray:
    """Block image of an (L, H) matrix: minimum cell coolest, maximum warmest."""
    m = np.asarray(matrix, dtype=np.float64)
    lo, hi = m.min(), m.max()
    unit = np.zeros_like(m) if hi == lo else (m - lo) / (hi - lo)
    rgb = colormaps.apply_lut(unit, colormaps.get(colormap))
    return np.repeat(np.repeat(rgb, cell, axis=0), cell, axis=1)


def export_heatmap(report: AblationReport, out_dir, cell: int = 32) -> list[Path]:
    out_dir = Path(out_dir)
    L, H = report.pct_increase.shape
    return [
        write_matrix_csv(out_dir / "heatmap.csv", report.pct_increase, header=[f"head{h}" for h in range(H)]),
        save_png(out_dir / "heatmap.png", heatmap_pixels(report.pct_increase, cell)),
    ]


def export_summary(report: AblationReport, out_dir) -> Path:
    path = Path(out_dir) / "summary.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "mu", "sigma", "label"])
        for l in range(len(report.mu)):
            w.writerow([l, format(report.mu[l], ".16e"), format(report.sigma[l], ".16e"), report.summary_label(l)])
        w.writerow(["baseline_loss", format(report.baseline_loss, ".16e"), "", ""])
    return path


def export_histograms(hists: HistogramSet, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "histograms.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "head", "bin_left", "count"])
        for i, c in enumerate(hists.baseline):
            w.writerow(["baseline", "baseline", format(hists.edges[i], ".16e"), int(c)])
        L, H, _ = hists.counts.shape
        for l in range(L):
            for h in range(H):
                for i, c in enumerate(hists.counts[l, h]):
                    w.writerow([l, h, format(hists.edges[i], ".16e"), int(c)])
    return [csv_path, _plot_histograms(hists, out_dir / "histograms.png")]


def _plot_histograms(hists: HistogramSet, path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    L, H, _ = hists.counts.shape
    left, width = hists.edges[:-1], np.diff(hists.edges)
    fig, axes = plt.subplots(L, H, figsize=(2.2 * H, 1.8 * L), sharex=True, squeeze=False)
    for l in range(L):
        for h in range(H):
            ax = axes[l, h]
            ax.bar(left, hists.baseline, width, align="edge", color="0.6", alpha=0.6, label="baseline")
            ax.bar(left, hists.counts[l, h], width, align="edge", color="tab:blue", alpha=0.6, label="ablated")
            ax.set_title(f"L{l} H{h}", fontsize=7)
            ax.tick_params(labelsize=6)
    axes[0, 0].legend(fontsize=6)
    fig.supxlabel("predicted start time (normalised)", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="png", dpi=80, metadata={"Software": None})
    plt.close(fig)
    return path


def export_report(report: AblationReport, hists: HistogramSet | None, out_dir) -> list[Path]:
    paths = export_heatmap(report, out_dir) + [export_summary(report, out_dir)]
    if hists is not None:
        paths += export_histograms(hists, out_dir)
    return paths
