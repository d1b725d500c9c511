"""Interpretability toolkit for a small Vision Transformer that reads chirp spectrograms.

Modules:

- ``numerics``: tape-based reverse-mode autodiff and gradient checking
- ``chirpgen``: chirp synthesis, spectrogram rendering and datasets
- ``vit``: the ViT regressor with LoRA adapters and checkpoints
- ``train``: MSE training and evaluation
- ``attention``: per-head attention maps and overlays
- ``ablation``: single-head ablation sweeps
- ``semanticity``: mono/polysemantic head labelling
"""

__version__ = "0.1.0"
