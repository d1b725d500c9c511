"""
Inside the ViT regressor
========================

Build the desk-scale model, push an image through it and look at the
attention tensor.  Then check that LoRA adapters start as an exact no-op.
"""

from dataclasses import replace

import numpy as np

from chirpscope import chirpgen as cg
from chirpscope import vit
from chirpscope.cli import build_config

cfg = build_config().vit
print(cfg)
print(f"{vit.n_params(cfg):,} parameters, patch grid {cfg.grid_p}x{cfg.grid_p}, {cfg.n_tokens} tokens")

params = vit.init_params(cfg, seed=0)
lora = sum(v.size for k, v in params.items() if vit.is_lora(k))
print(f"of which {lora:,} belong to the LoRA adapters on query and value")

item = cg.generate(cg.ChirpSpec(0.2, 1.2, 100.0, 300.0, seed=1), cg.Ranges())
x = vit.preprocess(item, [0.5] * 3, [0.25] * 3, cfg)[None]
pred, attn = vit.forward(x, params, cfg)
print("\nprediction of the untrained model:", np.round(pred[0], 3))
print("attention tensor (batch, layer, head, token, token):", attn.shape)
print("largest deviation of a row sum from 1:", np.abs(attn.sum(-1) - 1).max())

# B starts at zero, so W + alpha * A @ B == W exactly
random_a = {k: (np.random.default_rng(2).standard_normal(v.shape) if "lora_A" in k else v) for k, v in params.items()}
same, _ = vit.forward(x, random_a, cfg)
print("\nchanging A while B = 0 moves the output by", np.abs(same - pred).max())
off, _ = vit.forward(x, params, replace(cfg, lora_alpha=0.0))
print("setting alpha = 0 moves it by", np.abs(off - pred).max())

# the two block styles
for style in vit.BLOCK_STYLES:
    c = replace(cfg, block_style=style)
    p = vit.init_params(c, 0)
    print(f"{style:14s} prediction {np.round(vit.forward(x, p, c)[0][0], 3)}")
