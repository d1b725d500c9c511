"""Synthetic chirp spectrograms dressed up as matplotlib-style figures.

Each sample is a single chirp (linear, quadratic or exponential sweep) plus
white noise, turned into a Hann-window magnitude spectrogram and painted onto
a square canvas together with distractors: a title band, axis tick labels,
and a colorbar with its own labels.  Text is drawn as pseudo-glyphs, small
deterministic stroke patterns with text-like statistics.  Every distractor
lives inside a rectangle recorded in :class:`PlotGeometry`, so downstream
code knows exactly where the non-task content is.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import colormaps

SHAPES = ("linear", "quadratic", "exponential")
MANIFEST_KIND = "chirpscope-manifest"
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class ChirpSpec:
    start_time: float
    duration: float
    f_start: float
    f_end: float
    shape: str = "linear"
    amplitude: float = 1.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown chirp shape {self.shape!r}")
        if self.start_time < 0 or self.duration < 0:
            raise ValueError("start_time and duration must be non-negative")
        if self.f_start <= 0 or self.f_end <= 0:
            raise ValueError("chirp frequencies must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    @property
    def end_time(self) -> float:
        return self.start_time + self.duration

    def instantaneous_frequency(self, t) -> np.ndarray:
        """Sweep law f(t) in Hz, evaluated for t inside the active interval."""
        u = (np.asarray(t, dtype=np.float64) - self.start_time) / max(self.duration, 1e-300)
        f0, f1 = self.f_start, self.f_end
        if self.shape == "linear":
            return f0 + (f1 - f0) * u
        if self.shape == "quadratic":
            return f0 + (f1 - f0) * u * u
        return f0 * (f1 / f0) ** u

    def phase(self, t) -> np.ndarray:
        """Closed-form integral of 2*pi*f from the chirp onset."""
        tau = np.asarray(t, dtype=np.float64) - self.start_time
        T = self.duration
        f0, f1 = self.f_start, self.f_end
        if self.shape == "linear":
            cycles = f0 * tau + (f1 - f0) * tau**2 / (2 * T)
        elif self.shape == "quadratic":
            cycles = f0 * tau + (f1 - f0) * tau**3 / (3 * T * T)
        elif f1 == f0:
            cycles = f0 * tau
        else:
            r = f1 / f0
            cycles = f0 * T * (r ** (tau / T) - 1.0) / math.log(r)
        return 2 * np.pi * cycles


@dataclass(frozen=True)
class SignalConfig:
    fs: float = 1000.0
    total_dur: float = 2.0
    window_len: int = 128
    hop: int = 16

    @property
    def nyquist(self) -> float:
        return self.fs / 2

    @property
    def bin_hz(self) -> float:
        return self.fs / self.window_len

    @property
    def n_samples(self) -> int:
        return int(round(self.fs * self.total_dur))

    @property
    def n_frames(self) -> int:
        return (self.n_samples - self.window_len) // self.hop + 1

    def frame_centers(self) -> np.ndarray:
        """Frame centre times in seconds."""
        return (np.arange(self.n_frames) * self.hop + self.window_len / 2) / self.fs


@dataclass(frozen=True)
class Ranges:
    """Sampling ranges; the first three also define label normalisation."""

    start_time: tuple[float, float] = (0.0, 0.8)
    f_start: tuple[float, float] = (40.0, 460.0)
    f_end: tuple[float, float] = (40.0, 460.0)
    duration: tuple[float, float] = (0.4, 1.0)
    noise_sigma: tuple[float, float] = (0.0, 0.5)
    amplitude: tuple[float, float] = (1.0, 1.0)
    shapes: tuple[str, ...] = SHAPES

    LABEL_FIELDS = ("start_time", "f_start", "f_end")

    def normalize(self, spec: ChirpSpec) -> np.ndarray:
        y = []
        for name in self.LABEL_FIELDS:
            lo, hi = getattr(self, name)
            y.append(0.0 if hi == lo else (getattr(spec, name) - lo) / (hi - lo))
        return np.clip(np.array(y), 0.0, 1.0)

    def denormalize(self, y) -> dict[str, float]:
        out = {}
        for name, v in zip(self.LABEL_FIELDS, y):
            lo, hi = getattr(self, name)
            out[name] = lo + float(v) * (hi - lo)
        return out

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Ranges":
        return cls(**{k: tuple(v) for k, v in d.items()})


# ---------------------------------------------------------------------------
# signal and spectrogram
# ---------------------------------------------------------------------------


def synth_signal(spec: ChirpSpec, fs: float = 1000.0, total_dur: float = 2.0) -> np.ndarray:
    """Chirp samples over ``[0, total_dur)`` plus white noise from ``spec.seed``."""
    if max(spec.f_start, spec.f_end) >= fs / 2:
        raise ValueError(f"chirp frequency above Nyquist ({fs / 2} Hz)")
    if spec.end_time > total_dur + 1e-12:
        raise ValueError("chirp extends past the end of the signal")
    n = int(round(fs * total_dur))
    t = np.arange(n) / fs
    active = (t >= spec.start_time) & (t < spec.end_time)
    x = np.zeros(n)
    x[active] = spec.amplitude * np.sin(spec.phase(t[active]))
    if spec.noise_sigma > 0:
        x += np.random.default_rng(spec.seed).normal(0.0, spec.noise_sigma, n)
    return x


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def stft(samples, window_len: int = 128, hop: int = 16) -> np.ndarray:
    """Magnitude spectrogram, shape (frames, window_len // 2 + 1)."""
    x = np.asarray(samples, dtype=np.float64)
    if hop < 1:
        raise ValueError("hop must be >= 1")
    if window_len > x.size:
        raise ValueError(f"need at least {window_len} samples, got {x.size}")
    n_frames = (x.size - window_len) // hop + 1
    idx = np.arange(window_len)[None, :] + hop * np.arange(n_frames)[:, None]
    return np.abs(np.fft.rfft(x[idx] * hann(window_len), axis=1))


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Rect:
    """Half-open pixel rectangle [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return max(0, self.x1 - self.x0)

    @property
    def height(self) -> int:
        return max(0, self.y1 - self.y0)

    @property
    def area(self) -> int:
        return self.width * self.height

    @property
    def empty(self) -> bool:
        return self.area == 0

    def intersects(self, other: "Rect") -> bool:
        return (
            min(self.x1, other.x1) > max(self.x0, other.x0)
            and min(self.y1, other.y1) > max(self.y0, other.y0)
        )

    def to_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]


EMPTY = Rect(0, 0, 0, 0)
DISTRACTORS = ("title", "xlabel", "ylabel", "colorbar", "colorbar_label")


@dataclass(frozen=True)
class PlotGeometry:
    canvas: tuple[int, int]
    data_rect: Rect
    title_rect: Rect = EMPTY
    xlabel_rect: Rect = EMPTY
    ylabel_rect: Rect = EMPTY
    colorbar_rect: Rect = EMPTY
    colorbar_label_rect: Rect = EMPTY
    time_extent: tuple[float, float] = (0.0, 2.0)
    freq_extent: tuple[float, float] = (0.0, 500.0)

    def distractors(self) -> dict[str, Rect]:
        return {name: getattr(self, f"{name}_rect") for name in DISTRACTORS}

    def time_to_x(self, t) -> np.ndarray:
        """Continuous pixel coordinate (pixel i spans [i, i+1))."""
        t0, t1 = self.time_extent
        r = self.data_rect
        return r.x0 + (np.asarray(t, dtype=np.float64) - t0) / (t1 - t0) * r.width

    def freq_to_y(self, f) -> np.ndarray:
        f0, f1 = self.freq_extent
        r = self.data_rect
        return r.y0 + (f1 - np.asarray(f, dtype=np.float64)) / (f1 - f0) * r.height

    def to_dict(self) -> dict:
        d = {"canvas": list(self.canvas), "time_extent": list(self.time_extent), "freq_extent": list(self.freq_extent)}
        d["data_rect"] = self.data_rect.to_list()
        for name, rect in self.distractors().items():
            d[f"{name}_rect"] = rect.to_list()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PlotGeometry":
        kw = {k: Rect(*v) for k, v in d.items() if k.endswith("_rect")}
        return cls(
            canvas=tuple(d["canvas"]),
            time_extent=tuple(d["time_extent"]),
            freq_extent=tuple(d["freq_extent"]),
            **kw,
        )


@dataclass(frozen=True)
class DecorConfig:
    canvas: int = 256
    enabled: bool = True
    title_frac: float = 0.10
    label_frac: float = 0.12
    colorbar_frac: float = 0.10
    db_range: float = 60.0
    title: str = "Spectrogram"
    xlabel: str = "Time [s]"
    ylabel: str = "Freq [Hz]"
    min_data_px: int = 16


def layout(decor: DecorConfig, time_extent, freq_extent) -> PlotGeometry:
    """Partition the canvas into the data area and the distractor bands."""
    n = decor.canvas
    extents = dict(time_extent=tuple(map(float, time_extent)), freq_extent=tuple(map(float, freq_extent)))
    if not decor.enabled:
        return PlotGeometry(canvas=(n, n), data_rect=Rect(0, 0, n, n), **extents)
    top = int(round(decor.title_frac * n))
    left = int(round(decor.label_frac * n))
    bottom = n - int(round(decor.label_frac * n))
    right = n - int(round(decor.colorbar_frac * n))
    if min(right - left, bottom - top) < decor.min_data_px:
        raise ValueError(f"canvas {n}px too small for the configured margins")
    # the gradient takes the larger share of the right band
    split = right + (n - right + 1) // 2 + 1
    return PlotGeometry(
        canvas=(n, n),
        data_rect=Rect(left, top, right, bottom),
        title_rect=Rect(0, 0, n, top),
        ylabel_rect=Rect(0, top, left, bottom),
        xlabel_rect=Rect(0, bottom, right, n),
        colorbar_rect=Rect(right, top, split, n),
        colorbar_label_rect=Rect(split, top, n, n),
        **extents,
    )


# ---------------------------------------------------------------------------
# pseudo-glyph text
# ---------------------------------------------------------------------------


def glyph(ch: str) -> np.ndarray:
    """5x3 stroke bitmap for a character; blank for whitespace."""
    if ch.isspace():
        return np.zeros((5, 3), dtype=bool)
    h = (ord(ch) * 2654435761 + 0x9E3779B9) & 0xFFFFFFFF
    h ^= h >> 13
    bits = np.array([(h >> i) & 1 for i in range(15)], dtype=bool).reshape(5, 3)
    bits[:, 1] |= ~bits.any(axis=1)  # no empty rows: keeps strokes connected
    return bits


def text_bitmap(text: str, scale: int = 1, vertical: bool = False) -> np.ndarray:
    cells = []
    for ch in text:
        cells.append(glyph(ch))
        cells.append(np.zeros((5, 1), dtype=bool))
    bm = np.concatenate(cells[:-1], axis=1) if cells else np.zeros((5, 0), dtype=bool)
    bm = np.kron(bm, np.ones((scale, scale), dtype=bool))
    return np.rot90(bm) if vertical else bm


def _stamp(canvas: np.ndarray, bm: np.ndarray, cx: float, cy: float, rect: Rect, color) -> None:
    """Draw ``bm`` centred at (cx, cy), clipped to ``rect``."""
    h, w = bm.shape
    y0 = int(round(cy - h / 2))
    x0 = int(round(cx - w / 2))
    ys, xs = np.nonzero(bm)
    ys = ys + y0
    xs = xs + x0
    keep = (xs >= rect.x0) & (xs < rect.x1) & (ys >= rect.y0) & (ys < rect.y1)
    canvas[ys[keep], xs[keep]] = color


def _fit_scale(text: str, rect: Rect, along: int, across: int) -> int:
    n = max(len(text), 1)
    for s in (3, 2, 1):
        if 5 * s + 2 <= across and (4 * n - 1) * s <= along:
            return s
    return 1


def _nice_ticks(lo: float, hi: float, count: int = 5) -> np.ndarray:
    return np.linspace(lo, hi, count)


def _fmt(v: float) -> str:
    return f"{v:.1f}" if abs(v) < 10 else f"{v:.0f}"


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

TEXT_RGB = (40, 40, 40)
TICK_RGB = (0, 0, 0)
BACKGROUND_RGB = (255, 255, 255)


@dataclass
class DecoratedImage:
    pixels: np.ndarray  # H x W x 3 uint8
    geometry: PlotGeometry
    label: np.ndarray | None = None
    spec: ChirpSpec | None = None


def to_unit_level(grid: np.ndarray, db_range: float) -> np.ndarray:
    """Log-magnitude scaled to [0, 1] with a ``db_range`` floor below the peak."""
    grid = np.asarray(grid, dtype=np.float64)
    peak = grid.max()
    if peak <= 0:
        return np.zeros_like(grid)
    db = 20 * np.log10(np.maximum(grid, peak * 1e-12) / peak)
    return np.clip(1.0 + db / db_range, 0.0, 1.0)


def render(
    grid,
    decor: DecorConfig = DecorConfig(),
    *,
    sig: SignalConfig = SignalConfig(),
    spec: ChirpSpec | None = None,
    label=None,
) -> DecoratedImage:
    """Paint a (frames x bins) magnitude grid and its distractors on a canvas."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2 or grid.size == 0:
        raise ValueError("render needs a non-empty 2-D grid")
    geom = layout(decor, (0.0, sig.total_dur), (0.0, sig.nyquist))
    n = decor.canvas
    img = np.empty((n, n, 3), dtype=np.uint8)
    img[:] = BACKGROUND_RGB

    # data area: nearest frame / bin for every pixel centre
    r = geom.data_rect
    n_frames, n_bins = grid.shape
    t = (np.arange(r.width) + 0.5) / r.width * sig.total_dur
    frame = np.clip(np.round((t * sig.fs - sig.window_len / 2) / sig.hop), 0, n_frames - 1).astype(int)
    f = sig.nyquist - (np.arange(r.height) + 0.5) / r.height * sig.nyquist
    bins = np.clip(np.round(f / sig.bin_hz), 0, n_bins - 1).astype(int)
    level = to_unit_level(grid, decor.db_range)
    img[r.y0 : r.y1, r.x0 : r.x1] = colormaps.apply_lut(level[frame[None, :], bins[:, None]], colormaps.viridis())

    if decor.enabled:
        _draw_decorations(img, geom, decor)
    return DecoratedImage(img, geom, None if label is None else np.asarray(label), spec)


def _draw_decorations(img: np.ndarray, geom: PlotGeometry, decor: DecorConfig) -> None:
    d = geom.data_rect

    tr = geom.title_rect
    s = _fit_scale(decor.title, tr, tr.width, tr.height)
    _stamp(img, text_bitmap(decor.title, s), (tr.x0 + tr.x1) / 2, (tr.y0 + tr.y1) / 2, tr, TEXT_RGB)

    # x axis: ticks hug the data area, tick labels below, axis title at the bottom
    xr = geom.xlabel_rect
    for tv in _nice_ticks(*geom.time_extent):
        x = int(min(float(geom.time_to_x(tv)), d.x1 - 1))
        img[xr.y0 : min(xr.y0 + 3, xr.y1), x] = TICK_RGB
        _stamp(img, text_bitmap(_fmt(tv)), x, xr.y0 + 7, xr, TEXT_RGB)
    s = _fit_scale(decor.xlabel, xr, d.width, xr.height - 12)
    _stamp(img, text_bitmap(decor.xlabel, s), (d.x0 + d.x1) / 2, xr.y1 - 3 * s - 2, xr, TEXT_RGB)

    # y axis: rotated title on the far left, tick labels next to the ticks
    yr = geom.ylabel_rect
    s = _fit_scale(decor.ylabel, yr, yr.height, 8)
    _stamp(img, text_bitmap(decor.ylabel, s, vertical=True), yr.x0 + 3 * s + 1, (yr.y0 + yr.y1) / 2, yr, TEXT_RGB)
    for fv in _nice_ticks(*geom.freq_extent):
        y = int(min(float(geom.freq_to_y(fv)), d.y1 - 1))
        img[y, max(yr.x1 - 3, yr.x0) : yr.x1] = TICK_RGB
        bm = text_bitmap(_fmt(fv))
        _stamp(img, bm, yr.x1 - 4 - bm.shape[1] / 2, y, yr, TEXT_RGB)

    # colorbar: top = loudest, bottom = floor
    cr = geom.colorbar_rect
    pad = 2 if cr.width > 6 else 0
    rows = (np.arange(cr.height) + 0.5) / cr.height
    strip = colormaps.apply_lut(1.0 - rows, colormaps.viridis())
    img[cr.y0 : cr.y1, cr.x0 + pad : cr.x1 - pad] = strip[:, None, :]

    lr = geom.colorbar_label_rect
    for frac, txt in ((0.0, "0"), (0.5, f"-{decor.db_range / 2:.0f}"), (1.0, f"-{decor.db_range:.0f}")):
        y = lr.y0 + frac * (lr.height - 1)
        y = min(max(y, lr.y0 + 3), lr.y1 - 4)
        _stamp(img, text_bitmap(txt), (lr.x0 + lr.x1) / 2, y, lr, TEXT_RGB)


# ---------------------------------------------------------------------------
# ground-truth chirp footprint
# ---------------------------------------------------------------------------


def pixel_patch_index(n_pixels: int, grid_p: int) -> np.ndarray:
    """Patch index of every pixel along an axis of ``n_pixels`` pixels."""
    return np.floor((np.arange(n_pixels) + 0.5) * grid_p / n_pixels).astype(int)


def pixels_to_patches(pixel_mask: np.ndarray, grid_p: int) -> np.ndarray:
    """P x P mask of patches containing at least one marked pixel."""
    h, w = pixel_mask.shape
    rows = pixel_patch_index(h, grid_p)
    cols = pixel_patch_index(w, grid_p)
    out = np.zeros((grid_p, grid_p), dtype=bool)
    ys, xs = np.nonzero(pixel_mask)
    out[rows[ys], cols[xs]] = True
    return out


def chirp_pixel_mask(spec: ChirpSpec, geometry: PlotGeometry, half_width: int = 2) -> np.ndarray:
    """Canvas-sized mask of the rasterised frequency curve, dilated and clipped to the data area."""
    h, w = geometry.canvas
    mask = np.zeros((h, w), dtype=bool)
    if spec.duration <= 0:
        return mask
    r = geometry.data_rect
    n = max(8 * r.width, 16)
    t = np.linspace(spec.start_time, spec.end_time, n)
    xs = np.floor(geometry.time_to_x(t)).astype(int)
    ys = np.floor(geometry.freq_to_y(spec.instantaneous_frequency(t))).astype(int)
    curve = np.zeros((h, w), dtype=bool)
    for i in range(n):
        # fill the vertical run to the next sample so steep sweeps stay connected
        ya, yb = (ys[i], ys[i + 1]) if i + 1 < n and xs[i + 1] == xs[i] + 1 else (ys[i], ys[i])
        lo, hi = min(ya, yb), max(ya, yb)
        x = xs[i]
        if 0 <= x < w:
            curve[max(lo, 0) : min(hi + 1, h), x] = True
    if half_width > 0:
        ys_, xs_ = np.nonzero(curve)
        for dy in range(-half_width, half_width + 1):
            for dx in range(-half_width, half_width + 1):
                yy = ys_ + dy
                xx = xs_ + dx
                ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
                mask[yy[ok], xx[ok]] = True
    else:
        mask = curve
    clip = np.zeros_like(mask)
    clip[r.y0 : r.y1, r.x0 : r.x1] = True
    return mask & clip


def chirp_patch_mask(spec: ChirpSpec, geometry: PlotGeometry, grid_p: int, half_width: int = 2) -> np.ndarray:
    return pixels_to_patches(chirp_pixel_mask(spec, geometry, half_width), grid_p)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def sample_spec(rng: np.random.Generator, ranges: Ranges, sig: SignalConfig) -> ChirpSpec:
    start = rng.uniform(*ranges.start_time)
    duration = min(rng.uniform(*ranges.duration), sig.total_dur - start)
    return ChirpSpec(
        start_time=float(start),
        duration=float(duration),
        f_start=float(rng.uniform(*ranges.f_start)),
        f_end=float(rng.uniform(*ranges.f_end)),
        shape=str(ranges.shapes[rng.integers(len(ranges.shapes))]),
        amplitude=float(rng.uniform(*ranges.amplitude)),
        noise_sigma=float(rng.uniform(*ranges.noise_sigma)),
        seed=int(rng.integers(2**63)),
    )


def generate(spec: ChirpSpec, ranges: Ranges, sig: SignalConfig = SignalConfig(), decor: DecorConfig = DecorConfig()) -> DecoratedImage:
    grid = stft(synth_signal(spec, sig.fs, sig.total_dur), sig.window_len, sig.hop)
    return render(grid, decor, sig=sig, spec=spec, label=ranges.normalize(spec))


@dataclass(frozen=True)
class _Job:
    index: int
    seed: int
    ranges: Ranges
    sig: SignalConfig
    decor: DecorConfig
    out_dir: str


def _make_one(job: _Job) -> tuple[dict, np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([job.seed, job.index]))
    spec = sample_spec(rng, job.ranges, job.sig)
    item = generate(spec, job.ranges, job.sig, job.decor)
    rel = f"images/{job.index:06d}.png"
    Image.fromarray(item.pixels).save(Path(job.out_dir) / rel, format="PNG")
    unit = item.pixels.reshape(-1, 3) / 255.0
    record = {
        "index": job.index,
        "path": rel,
        "y": [float(v) for v in item.label],
        "spec": asdict(spec),
        "geometry": item.geometry.to_dict(),
    }
    return record, unit.sum(axis=0), (unit * unit).sum(axis=0)


def make_dataset(
    n: int,
    seed: int,
    out_dir,
    ranges: Ranges = Ranges(),
    *,
    sig: SignalConfig = SignalConfig(),
    decor: DecorConfig = DecorConfig(),
    workers: int = 1,
) -> Path:
    """Write ``n`` PNGs plus ``manifest.jsonl``; returns the manifest path.

    Line 0 of the manifest is a header (ranges, signal/decor settings and the
    per-channel pixel mean/std used for input normalisation); each following
    line describes one image.  Output bytes depend only on the arguments.
    """
    if n < 1:
        raise ValueError("dataset needs at least one image")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    jobs = [_Job(i, int(seed), ranges, sig, decor, str(out)) for i in range(n)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_make_one, jobs, chunksize=32))
    else:
        results = [_make_one(j) for j in jobs]

    # reduce in index order so the statistics do not depend on the worker count
    s1 = np.zeros(3)
    s2 = np.zeros(3)
    for _, a, b in results:
        s1 += a
        s2 += b
    count = n * decor.canvas * decor.canvas
    mean = s1 / count
    std = np.sqrt(np.maximum(s2 / count - mean * mean, 0.0))
    header = {
        "kind": MANIFEST_KIND,
        "version": MANIFEST_VERSION,
        "n": n,
        "seed": int(seed),
        "ranges": ranges.to_dict(),
        "signal": asdict(sig),
        "decor": asdict(decor),
        "channel_mean": [float(v) for v in mean],
        "channel_std": [float(v) for v in std],
    }
    path = out / "manifest.jsonl"
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for record, _, _ in results:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return path


@dataclass
class Manifest:
    path: Path
    header: dict
    records: list[dict] = field(default_factory=list)

    @property
    def root(self) -> Path:
        return self.path.parent

    @property
    def ranges(self) -> Ranges:
        return Ranges.from_dict(self.header["ranges"])

    @property
    def signal(self) -> SignalConfig:
        return SignalConfig(**self.header["signal"])

    def spec(self, i: int) -> ChirpSpec:
        return ChirpSpec(**self.records[i]["spec"])

    def geometry(self, i: int) -> PlotGeometry:
        return PlotGeometry.from_dict(self.records[i]["geometry"])

    def image(self, i: int) -> np.ndarray:
        with Image.open(self.root / self.records[i]["path"]) as im:
            return np.asarray(im.convert("RGB"))

    def subset(self, indices) -> "Manifest":
        return replace(self, records=[self.records[i] for i in indices])

    def __len__(self) -> int:
        return len(self.records)


def load_manifest(path) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    with open(path) as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or lines[0].get("kind") != MANIFEST_KIND:
        raise ValueError(f"{path}: not a chirpscope manifest")
    return Manifest(path, lines[0], lines[1:])


def default_workers() -> int:
    env = os.environ.get("CHIRPSCOPE_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1
