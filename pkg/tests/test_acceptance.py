"""End-to-end acceptance checks, one test per criterion.

Each test records its outcome through ``criterion`` so the session ends with
one PASS/FAIL line per criterion.  The two full pipeline runs are shared by
criteria 5, 6, 7 and 11.
"""

import csv
import filecmp
import json
import re
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from chirpscope import ablation, attention, cli, dataset, semanticity, train, vit
from chirpscope import chirpgen as cg
from chirpscope import numerics as nx
from chirpscope.pngio import load_png, read_matrix_csv

from conftest import SMALL, criterion

DESK = cli.build_config().vit


@pytest.fixture(scope="session")
def pipeline_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    runs = {}
    for name in ("a", "b"):
        t0 = time.perf_counter()
        rc = cli.main(["pipeline", "--seed", "7", "--out-dir", str(root / name)])
        runs[name] = (root / name, rc, time.perf_counter() - t0)
    return runs


def test_criterion_01_gradient_integrity():
    with criterion(1, "gradient integrity on the desk model (rel err <= 1e-4, <= 60 s)"):
        # fan_in init makes every tensor random, so every gradient path is live
        params = vit.init_params(DESK, 0, "fan_in")
        item = cg.generate(cg.ChirpSpec(0.3, 0.8, 100.0, 350.0, noise_sigma=0.1, seed=1), cg.Ranges())
        x = vit.preprocess(item, [0.5] * 3, [0.3] * 3, DESK)[None]
        y = item.label[None]

        def f(leaves):
            return train.mse_loss(vit.forward_tensor(x, leaves, DESK)[0], y)

        t0 = time.perf_counter()
        report = nx.grad_check(f, params, h=1e-5, samples_per_leaf=16)
        elapsed = time.perf_counter() - t0
        print(report, f"in {elapsed:.1f} s")
        assert len(report.errors) == len(params)
        assert report.max_error <= 1e-4, str(report)
        assert elapsed <= 60.0


def test_criterion_02_attention_rows_are_stochastic():
    with criterion(2, "attention rows sum to 1 within 1e-6 over 100 inputs"):
        rng = np.random.default_rng(2)
        worst = 0.0
        for style in vit.BLOCK_STYLES:
            cfg = replace(DESK, block_style=style)
            params = vit.init_params(cfg, 3, "fan_in")
            x = rng.standard_normal((100, cfg.channels, cfg.image_size, cfg.image_size)) * 3
            _, attn = vit.forward(x, params, cfg)
            assert attn.shape == (100, cfg.layers, cfg.heads, cfg.n_tokens, cfg.n_tokens)
            assert (attn >= 0).all()
            worst = max(worst, np.abs(attn.sum(axis=-1) - 1).max())
        assert worst <= 1e-6


def test_criterion_03_mask_and_weight_ablation_agree():
    with criterion(3, "masked forward equals ablate_weights forward within 1e-10 (20 draws)"):
        rng = np.random.default_rng(3)
        for draw in range(20):
            cfg = vit.ViTConfig(
                image_size=16, patch_size=4, width=12, layers=int(rng.integers(1, 4)), heads=int(rng.choice([1, 2, 3, 4])),
                ffn_dim=10, head_hidden=6, lora_rank=2, block_style=vit.BLOCK_STYLES[draw % 2],
            )
            params = vit.init_params(cfg, 50 + draw, "fan_in")
            l, h = int(rng.integers(cfg.layers)), int(rng.integers(cfg.heads))
            x = rng.standard_normal((4, 3, 16, 16))
            masked, _ = vit.forward(x, params, cfg, ablation.head_mask(cfg, l, h))
            zeroed, _ = vit.forward(x, ablation.ablate_weights(params, cfg, l, h), cfg)
            np.testing.assert_allclose(masked, zeroed, atol=1e-10, rtol=0)


def test_criterion_04_lora_identity():
    with criterion(4, "B = 0 or alpha = 0 reproduces the base model within 1e-12"):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((50, 3, DESK.image_size, DESK.image_size))
        for style in vit.BLOCK_STYLES:
            cfg = replace(DESK, block_style=style)
            params = vit.init_params(cfg, 5, "fan_in")
            base = {k: np.zeros_like(v) if vit.is_lora(k) else v for k, v in params.items()}
            y_base, _ = vit.forward(x, base, cfg)
            b_zero = {k: np.zeros_like(v) if "lora_B" in k else v for k, v in params.items()}
            y_b, _ = vit.forward(x, b_zero, cfg)
            y_alpha, _ = vit.forward(x, params, replace(cfg, lora_alpha=0.0))
            y_full, _ = vit.forward(x, params, cfg)
            np.testing.assert_allclose(y_b, y_base, atol=1e-12, rtol=0)
            np.testing.assert_allclose(y_alpha, y_base, atol=1e-12, rtol=0)
            # the adapters are live, so the identity is not vacuous
            assert np.abs(y_full - y_base).max() > 1e-6


def read_curve(path):
    with open(path) as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def test_criterion_05_toy_training(pipeline_runs):
    with criterion(5, "pipeline training halves the epoch-0 train MSE within 30 epochs, <= 15 min"):
        out, rc, elapsed = pipeline_runs["a"]
        assert rc == 0
        curve = read_curve(out / "ckpt" / "curve.csv")
        manifest = cg.load_manifest(out / "data")
        print(f"pipeline wall time {elapsed:.0f} s; train MSE {curve[0]['train_mse']:.4f} -> {curve[-1]['train_mse']:.4f}")
        assert len(manifest) == 2000
        assert [r["epoch"] for r in curve] == list(range(len(curve)))
        assert len(curve) - 1 <= 30
        assert curve[-1]["train_mse"] <= 0.5 * curve[0]["train_mse"]
        assert elapsed <= 15 * 60


def tree_files(root):
    return sorted(p.relative_to(root) for p in Path(root).rglob("*") if p.is_file())


def test_criterion_06_determinism(pipeline_runs):
    with criterion(6, "two pipeline --seed 7 runs are byte-identical"):
        (a, rc_a, _), (b, rc_b, _) = pipeline_runs["a"], pipeline_runs["b"]
        assert rc_a == rc_b == 0
        files = tree_files(a)
        assert files == tree_files(b)
        suffixes = {p.suffix for p in files}
        assert {".jsonl", ".ckpt", ".csv", ".png", ".json"} <= suffixes
        _, mismatch, errors = filecmp.cmpfiles(a, b, [str(p) for p in files], shallow=False)
        assert mismatch == [] and errors == []


LABEL = re.compile(r"^\(μ=-?\d+\.\d\d%, σ=\d+\.\d\d%\)$")


def test_criterion_07_sweep_correctness(pipeline_runs):
    with criterion(7, "every sweep cell matches an independent ablate -> evaluate within 1e-10"):
        out, _, _ = pipeline_runs["a"]
        ckpt = vit.load_checkpoint(out / "ckpt" / cli.CKPT_NAME)
        cfg = ckpt.cfg
        data = dataset.load_dataset(out / "data", cfg, "val", ckpt.mean, ckpt.std)
        table = read_matrix_csv(out / "ablation" / "heatmap.csv", header=True)
        assert table.shape == (cfg.layers, cfg.heads)

        # independent recomputation: explicit weight zeroing and a plain numpy loss
        def loss(params):
            pred = np.concatenate([vit.forward(data.x[s : s + 50], params, cfg)[0] for s in range(0, len(data), 50)])
            return np.mean(np.sum((pred - data.y) ** 2, axis=1))

        base = loss(ckpt.params)
        for l in range(cfg.layers):
            for h in range(cfg.heads):
                pct = 100.0 * (loss(ablation.ablate_weights(ckpt.params, cfg, l, h)) - base) / base
                assert abs(table[l, h] - pct) <= 1e-10, (l, h, table[l, h], pct)

        with open(out / "ablation" / "summary.csv", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["layer", "mu", "sigma", "label"]
        layer_rows = rows[1 : 1 + cfg.layers]
        for l, (layer, mu, sigma, label) in enumerate(layer_rows):
            assert int(layer) == l
            assert float(mu) == pytest.approx(table[l].mean(), abs=1e-12)
            assert float(sigma) == pytest.approx(table[l].std(), abs=1e-12)
            assert LABEL.match(label), label
            assert label == f"(μ={float(mu):.2f}%, σ={float(sigma):.2f}%)"
        assert rows[-1][0] == "baseline_loss" and abs(float(rows[-1][1]) - base) <= 1e-12


def test_criterion_08_map_pipeline():
    with criterion(8, "hand-built attention yields the forced maps; normalize and overlay edge cases"):
        P = 4
        T = P * P + 1
        uniform = np.full((T, T), 1.0 / T)
        np.testing.assert_allclose(attention.extract_maps(uniform, P), np.full((P, P), 1.0 / T), atol=1e-15)
        for k in (0, 5, P * P - 1):
            onehot = np.zeros((T, T))
            onehot[:, k + 1] = 1.0
            m = attention.extract_maps(onehot, P)
            expect = np.zeros(P * P)
            expect[k] = 1.0
            np.testing.assert_array_equal(attention.normalize_map(m).reshape(-1), expect)
        np.testing.assert_array_equal(attention.normalize_map(np.array([1.0, 2.0, 3.0])), [0.0, 0.5, 1.0])
        img = cg.generate(cg.ChirpSpec(0.2, 0.9, 60.0, 420.0, seed=3), cg.Ranges()).pixels
        out = attention.overlay(img, np.random.default_rng(8).random((8, 8)), alpha=0.0)
        assert out.dtype == img.dtype and out.tobytes() == img.tobytes()


def chirp_attention(data, grid_p, L=2, H=3):
    """Rigged model: every query of every head lands one-hot on a chirp patch."""
    masks = semanticity.dataset_masks(data, grid_p)
    T = grid_p * grid_p + 1

    def fn(pos):
        out = np.zeros((len(pos), L, H, T, T))
        for b, i in enumerate(pos):
            k = int(np.flatnonzero(masks[i]["chirp"])[-1])
            out[b, ..., k + 1] = 1.0
        return out

    return fn


def test_criterion_09_semanticity_oracle(small_data):
    with criterion(9, "rigged chirp head is monosemantic_task, uniform head polysemantic, partition sums to 1"):
        grid_p = SMALL.grid_p
        profiles, _ = semanticity.profile_heads(chirp_attention(small_data, grid_p), small_data, tau=0.6, grid_p=grid_p)
        assert len(profiles) == 6
        for p in profiles:
            assert p.tag == "monosemantic_task" and p.confidence == 1.0

        masks = semanticity.dataset_masks(small_data, grid_p)
        areas = [np.mean([ms[r].mean() for ms in masks]) for r in ("chirp",) + semanticity.DISTRACTOR_REGIONS]
        T = grid_p * grid_p + 1
        uniform = lambda pos: np.full((len(pos), 1, 1, T, T), 1.0 / T)
        for tau in np.linspace(max(max(areas), 0.5) + 1e-6, 0.999, 6):
            (p,), _ = semanticity.profile_heads(uniform, small_data, tau=float(tau), grid_p=grid_p)
            assert p.label == semanticity.POLY

        rng = np.random.default_rng(9)
        for ms in masks:
            m = rng.random((grid_p, grid_p)) ** 3
            total = sum(semanticity.concentration(m, mask) for mask in ms.partition())
            assert abs(total - 1.0) <= 1e-9


def test_criterion_10_signal_fidelity():
    with criterion(10, "STFT peak bin within 1 bin of the analytic frequency in >= 95% of active frames"):
        sig = cg.SignalConfig()
        ranges = cg.Ranges(noise_sigma=(0.0, 0.0), shapes=("linear",))
        rng = np.random.default_rng(10)
        hits = total = 0
        for _ in range(200):
            spec = cg.sample_spec(rng, ranges, sig)
            mag = cg.stft(cg.synth_signal(spec, sig.fs, sig.total_dur), sig.window_len, sig.hop)
            starts = np.arange(mag.shape[0]) * sig.hop / sig.fs
            ends = starts + sig.window_len / sig.fs
            for i in np.nonzero((starts >= spec.start_time) & (ends <= spec.end_time))[0]:
                t = sig.frame_centers()[i]
                # oracle: numerical derivative of the closed-form phase
                f = (spec.phase(t + 1e-6) - spec.phase(t - 1e-6)) / 2e-6 / (2 * np.pi)
                hits += abs(np.argmax(mag[i]) - f / sig.bin_hz) <= 1.0
                total += 1
        print(f"{hits}/{total} active frames within one bin")
        assert total > 1000
        assert hits / total >= 0.95


def test_criterion_11_report_parity(pipeline_runs):
    with criterion(11, "pipeline emits histogram, heatmap, monosemantic gallery and polysemantic figures"):
        out, _, _ = pipeline_runs["a"]
        cfg = vit.load_checkpoint(out / "ckpt" / cli.CKPT_NAME).cfg
        L, H = cfg.layers, cfg.heads
        ab, se = out / "ablation", out / "semanticity"

        # histograms with baseline overlay
        with open(ab / "histograms.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["layer", "head", "bin_left", "count"]
        series = {(r["layer"], r["head"]) for r in rows}
        assert ("baseline", "baseline") in series and len(series) == 1 + L * H
        hist = load_png(ab / "histograms.png")
        assert hist.ndim == 3 and hist.shape[0] >= 200 and hist.shape[1] >= 200

        # pct-increase heatmap, blue for the smallest cell and red for the largest
        table = read_matrix_csv(ab / "heatmap.csv", header=True)
        heat = load_png(ab / "heatmap.png")
        assert table.shape == (L, H)
        cell = heat.shape[0] // L
        assert heat.shape[:2] == (L * cell, H * cell)
        lo = np.unravel_index(np.argmin(table), table.shape)
        hi = np.unravel_index(np.argmax(table), table.shape)
        px_lo = heat[lo[0] * cell + cell // 2, lo[1] * cell + cell // 2].astype(int)
        px_hi = heat[hi[0] * cell + cell // 2, hi[1] * cell + cell // 2].astype(int)
        assert px_lo[2] > px_lo[0] and px_hi[0] > px_hi[2]

        # per-head attention overlays at image resolution
        for l in range(L):
            for h in range(H):
                assert load_png(out / "attention" / f"layer{l}_head{h}.png").shape == (256, 256, 3)
                assert read_matrix_csv(out / "attention" / f"layer{l}_head{h}.csv").shape == (cfg.grid_p, cfg.grid_p)

        # semanticity profiles, gallery, and both figures
        profiles = json.loads((se / "profiles.json").read_text())
        assert len(profiles) == L * H
        assert {"layer", "head", "label", "region", "confidence", "entropy", "tag"} <= set(profiles[0])
        gallery = sorted((se / "gallery").glob("*.png"))
        assert len(gallery) == L * H
        for p in profiles:
            assert (se / "gallery" / f"layer{p['layer']}_head{p['head']}_{p['tag']}.png").is_file()
        for fig in ("fig_monosemantic.png", "fig_polysemantic.png"):
            img = load_png(se / fig)
            assert img.ndim == 3 and min(img.shape[:2]) >= 256
