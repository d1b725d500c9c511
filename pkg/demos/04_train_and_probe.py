"""
Train, ablate, look
===================

A small end-to-end run on a few hundred images: train the regressor,
zero-ablate every head, and score what each head attends to.  The full
2,000-image run is ``chirpscope pipeline --seed 7 --out-dir run``.
"""

import logging
from pathlib import Path

import numpy as np

from chirpscope import ablation, semanticity, train
from chirpscope.chirpgen import make_dataset
from chirpscope.cli import build_config
from chirpscope.dataset import load_dataset

logging.basicConfig(level=logging.INFO, format="%(message)s")
out = Path("demo_out")

rc = build_config(epochs=6)
make_dataset(400, seed=3, out_dir=out / "data")
tr = load_dataset(out / "data", rc.vit, "train")
va = load_dataset(out / "data", rc.vit, "val")
print(f"{len(tr)} training and {len(va)} validation images")

result = train.train(tr, rc.vit, rc.train, val_data=va)
curve = result.curve
print(f"train MSE {curve[0]['train_mse']:.3f} -> {curve[-1]['train_mse']:.3f}")
print(f"predicting the label mean would give {np.mean(np.sum((va.y - tr.y.mean(0)) ** 2, axis=1)):.3f} on validation")

ckpt = result.checkpoint
report = ablation.sweep(ckpt, va)
print("\n% increase in validation MSE when a head is zeroed (rows = layers):")
print(np.array2string(report.pct_increase, precision=1, suppress_small=True))
for layer in range(rc.vit.layers):
    print(f"  layer {layer} {report.summary_label(layer)}")

profiles, maps = semanticity.profile_heads(ckpt, va)
print("\nhead profiles:")
for p in profiles:
    top = max(p.region_means, key=p.region_means.get)
    print(f"  L{p.layer}H{p.head} {p.tag:32s} chirp {p.region_means['chirp']:.2f}  strongest region {top} {p.region_means[top]:.2f}")
semanticity.export_profiles(profiles, maps, va, out / "semanticity")
print("\noverlays written to", out / "semanticity")
