"""Vision Transformer regressor built on :mod:`chirpscope.numerics`.

Row-vector convention throughout: tokens are rows, ``Q = Z @ Wq``, and head
``h`` owns columns ``h*head_dim:(h+1)*head_dim`` of ``Wq``, ``Wk`` and ``Wv``.
The patch projection ``E`` (D x patch_dim) and the regression head weights
``W0, W1, W2`` are stored (out, in) and applied as ``x @ W.T``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numerics as nx
from .numerics import Tensor

BLOCK_STYLES = ("paper_literal", "standard_vit")
ACTIVATIONS = ("relu", "gelu")


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 64
    channels: int = 3
    patch_size: int = 8
    width: int = 64
    layers: int = 4
    heads: int = 4
    ffn_dim: int = 128
    head_hidden: int = 64
    out_dim: int = 3
    lora_rank: int = 4
    lora_alpha: float = 1.0
    block_style: str = "paper_literal"
    ffn_activation: str = "relu"
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if self.out_dim != 3:
            raise ValueError("out_dim is fixed at 3")
        if self.block_style not in BLOCK_STYLES:
            raise ValueError(f"block_style must be one of {BLOCK_STYLES}")
        if self.ffn_activation not in ACTIVATIONS:
            raise ValueError(f"ffn_activation must be one of {ACTIVATIONS}")

    @property
    def grid_p(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.grid_p**2 + 1

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.channels

    @classmethod
    def vit_base(cls, **overrides) -> "ViTConfig":
        """ViT-Base shape: 224 px, 16 px patches, 12 layers x 12 heads."""
        base = dict(image_size=224, patch_size=16, width=768, layers=12, heads=12, ffn_dim=3072, head_hidden=256)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ViTConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

LAYER_KEYS = ("Wq", "Wk", "Wv", "Wo", "lora_Aq", "lora_Bq", "lora_Av", "lora_Bv",
              "ln1_g", "ln1_b", "ln2_g", "ln2_b", "W1", "b1", "W2", "b2")
HEAD_KEYS = ("head.W0", "head.b0", "head.W1", "head.b1", "head.W2", "head.b2")


def param_shapes(cfg: ViTConfig) -> dict[str, tuple[int, ...]]:
    D, F, r, Hh = cfg.width, cfg.ffn_dim, cfg.lora_rank, cfg.head_hidden
    shapes = {"E": (D, cfg.patch_dim), "E_bias": (D,), "cls": (D,), "pos": (cfg.n_tokens, D)}
    for l in range(cfg.layers):
        per = {
            "Wq": (D, D), "Wk": (D, D), "Wv": (D, D), "Wo": (D, D),
            "lora_Aq": (D, r), "lora_Bq": (r, D), "lora_Av": (D, r), "lora_Bv": (r, D),
            "ln1_g": (D,), "ln1_b": (D,), "ln2_g": (D,), "ln2_b": (D,),
            "W1": (D, F), "b1": (F,), "W2": (F, D), "b2": (D,),
        }
        shapes.update({f"layer{l}.{k}": per[k] for k in LAYER_KEYS})
    shapes.update({"lnf_g": (D,), "lnf_b": (D,)})
    shapes.update({
        "head.W0": (Hh, D), "head.b0": (Hh,),
        "head.W1": (Hh, Hh), "head.b1": (Hh,),
        "head.W2": (cfg.out_dim, Hh), "head.b2": (cfg.out_dim,),
    })
    return shapes


def is_lora(name: str) -> bool:
    return ".lora_" in name


def is_head(name: str) -> bool:
    return name.startswith("head.")


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2
    return x * std


INIT_SCHEMES = ("scaled", "trunc_normal", "fan_in")


def _fan_in(name: str, shape) -> int:
    # E and head weights are stored (out, in); everything else (in, out)
    return shape[1] if name == "E" or is_head(name) else shape[0]


def init_params(cfg: ViTConfig, seed: int = 0, scheme: str = "scaled") -> dict[str, np.ndarray]:
    """Fresh parameters.

    ``trunc_normal``: truncated-normal projections with std 0.02, zero biases,
    LayerNorm at identity, LoRA ``B = 0`` so the adapter starts as a no-op.
    ``scaled`` (training default): the same convention, but the truncated
    normal std is 1/sqrt(fan_in).  At width 64 the fixed 0.02 leaves attention
    logits near zero and the CLS token sees only a uniform patch average.
    ``fan_in``: every tensor random at unit-gain scale, including biases and
    LoRA; attention is far from uniform, which makes it the better point for
    gradient checks and equivalence tests.
    """
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        key = name.rsplit(".", 1)[-1]
        if scheme == "fan_in":
            if key.endswith("_g"):
                params[name] = 1.0 + 0.1 * rng.standard_normal(shape)
            elif len(shape) == 1:
                params[name] = 0.1 * rng.standard_normal(shape)
            else:
                params[name] = rng.standard_normal(shape) / np.sqrt(_fan_in(name, shape))
        elif key.endswith("_g"):
            params[name] = np.ones(shape)
        elif key.startswith("lora_A"):
            params[name] = rng.standard_normal(shape) / np.sqrt(cfg.width)
        elif key.startswith("lora_B") or (len(shape) == 1 and key != "cls"):
            params[name] = np.zeros(shape)
        elif scheme == "scaled" and len(shape) == 2:
            params[name] = _trunc_normal(rng, shape, 1.0 / np.sqrt(_fan_in(name, shape)))
        else:
            params[name] = _trunc_normal(rng, shape)
    return params


def n_params(cfg: ViTConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) linear-interpolation weights with half-pixel centres.

    When shrinking, the triangle kernel is widened by the scale factor so every
    input pixel contributes (antialiased bilinear); when enlarging this is
    ordinary bilinear interpolation with edge clamping.
    """
    scale = n_in / n_out
    support = max(scale, 1.0)
    centers = (np.arange(n_out) + 0.5) * scale
    dist = np.abs((np.arange(n_in) + 0.5)[None, :] - centers[:, None]) / support
    w = np.maximum(0.0, 1.0 - dist)
    return w / w.sum(axis=1, keepdims=True)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize an (H, W, C) float image."""
    img = np.asarray(img, dtype=np.float64)
    rh = resize_matrix(img.shape[0], out_h)
    rw = resize_matrix(img.shape[1], out_w)
    rows = np.tensordot(rh, img, axes=(1, 0))  # (out_h, W, C)
    return np.tensordot(rows, rw, axes=(1, 1)).transpose(0, 2, 1)


def preprocess(img, mean, std, cfg: ViTConfig) -> np.ndarray:
    """uint8 (H, W, C) image -> normalised float (C, H', W')."""
    pixels = getattr(img, "pixels", img)
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    std = np.asarray(std, dtype=np.float64).reshape(-1)
    if np.any(std <= 0):
        raise ValueError("normalisation std must be positive")
    x = resize_bilinear(pixels, cfg.image_size, cfg.image_size) / 255.0
    x = (x - mean) / std
    return np.ascontiguousarray(x.transpose(2, 0, 1))


def patchify(x: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    """(B, C, H, W) -> (B, P*P, C*ps*ps); patches row-major, each flattened (C, ps, ps)."""
    B, C = x.shape[:2]
    P, ps = cfg.grid_p, cfg.patch_size
    x = x.reshape(B, C, P, ps, P, ps).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(B, P * P, C * ps * ps)


# ---------------------------------------------------------------------------
# model pieces
# ---------------------------------------------------------------------------


def lora_apply(W, A, B, alpha: float) -> Tensor:
    """W' = W + alpha * (A @ B) with A: (d, r), B: (r, d)."""
    W, A, B = (x if isinstance(x, Tensor) else Tensor(x) for x in (W, A, B))
    if A.shape[1] != B.shape[0] or (A.shape[0], B.shape[1]) != W.shape:
        raise ValueError(f"lora shapes {A.shape} @ {B.shape} do not match W {W.shape}")
    if alpha == 0:
        return W
    return nx.add(W, nx.scale(nx.matmul(A, B), alpha))


def patch_embed(x: np.ndarray, params: Mapping, cfg: ViTConfig) -> Tensor:
    """Z0 = [cls; patches @ E.T + bias] + pos, shape (B, P*P+1, D)."""
    patches = patchify(np.asarray(x, dtype=np.float64), cfg)
    B = patches.shape[0]
    tokens = nx.add(nx.matmul(patches, nx.swap_last(params["E"])), params["E_bias"])
    cls = nx.add(np.zeros((B, 1, cfg.width)), params["cls"])
    return nx.add(nx.concat([cls, tokens], axis=1), params["pos"])


def _layer(params: Mapping, l: int) -> dict:
    return {k: params[f"layer{l}.{k}"] for k in LAYER_KEYS}


def mha_forward(Z, lp: Mapping, cfg: ViTConfig, ablate=None) -> tuple[Tensor, np.ndarray]:
    """Multi-head self-attention for (B, T, D) tokens.

    ``ablate`` is a length-H boolean sequence; ablated heads contribute exact
    zeros and report uniform attention rows (what zeroed Q/K would give).
    Returns the projected output and attention weights (B, H, T, T).
    """
    Z = Z if isinstance(Z, Tensor) else Tensor(Z)
    squeeze = Z.ndim == 2
    if squeeze:
        Z = nx.reshape(Z, (1,) + Z.shape)
    B, T, D = Z.shape
    H, dh = cfg.heads, cfg.head_dim
    Wq = lora_apply(lp["Wq"], lp["lora_Aq"], lp["lora_Bq"], cfg.lora_alpha)
    Wv = lora_apply(lp["Wv"], lp["lora_Av"], lp["lora_Bv"], cfg.lora_alpha)

    def heads(W):
        return nx.transpose(nx.reshape(nx.matmul(Z, W), (B, T, H, dh)), (0, 2, 1, 3))

    q, k, v = heads(Wq), heads(lp["Wk"]), heads(Wv)
    logits = nx.scale(nx.matmul(q, nx.swap_last(k)), 1.0 / np.sqrt(dh))
    attn = nx.softmax_rows(logits)
    out = nx.matmul(attn, v)
    weights = attn.data
    if ablate is not None and np.any(ablate):
        keep = (~np.asarray(ablate, dtype=bool)).astype(np.float64)
        out = nx.mul(out, keep[None, :, None, None])
        weights = weights.copy()
        weights[:, ~keep.astype(bool)] = 1.0 / T
    out = nx.reshape(nx.transpose(out, (0, 2, 1, 3)), (B, T, D))
    out = nx.matmul(out, lp["Wo"])
    if squeeze:
        return nx.reshape(out, (T, D)), weights[0]
    return out, weights


def _act(x, cfg: ViTConfig) -> Tensor:
    return nx.relu(x) if cfg.ffn_activation == "relu" else nx.gelu(x)


def ffn(x, lp: Mapping, cfg: ViTConfig) -> Tensor:
    hidden = _act(nx.add(nx.matmul(x, lp["W1"]), lp["b1"]), cfg)
    return nx.add(nx.matmul(hidden, lp["W2"]), lp["b2"])


def block_forward(Z, lp: Mapping, cfg: ViTConfig, ablate=None, style: str | None = None) -> tuple[Tensor, np.ndarray]:
    """One encoder layer.

    ``paper_literal``: Z' = FFN(LN(Z + MSA(Z)))   (post-norm, no FFN residual)
    ``standard_vit``:  Z' = Z + MSA(LN1(Z)); Z'' = Z' + FFN(LN2(Z'))
    """
    style = style or cfg.block_style
    eps = cfg.ln_eps
    if style == "paper_literal":
        msa, attn = mha_forward(Z, lp, cfg, ablate)
        normed = nx.layer_norm(nx.add(Z, msa), lp["ln1_g"], lp["ln1_b"], eps)
        return ffn(normed, lp, cfg), attn
    if style == "standard_vit":
        msa, attn = mha_forward(nx.layer_norm(Z, lp["ln1_g"], lp["ln1_b"], eps), lp, cfg, ablate)
        Z1 = nx.add(Z, msa)
        return nx.add(Z1, ffn(nx.layer_norm(Z1, lp["ln2_g"], lp["ln2_b"], eps), lp, cfg)), attn
    raise ValueError(f"unknown block style {style!r}")


def regression_head(h_cls, params: Mapping) -> Tensor:
    """y = W2 relu(W1 relu(W0 h + b0) + b1) + b2 on (B, D) or (D,) inputs."""
    a = nx.relu(nx.add(nx.matmul(_rows(h_cls), nx.swap_last(params["head.W0"])), params["head.b0"]))
    a = nx.relu(nx.add(nx.matmul(a, nx.swap_last(params["head.W1"])), params["head.b1"]))
    y = nx.add(nx.matmul(a, nx.swap_last(params["head.W2"])), params["head.b2"])
    if np.ndim(getattr(h_cls, "data", h_cls)) == 1:
        return nx.reshape(y, (y.shape[-1],))
    return y


def _rows(x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    return nx.reshape(x, (1, x.shape[0])) if x.ndim == 1 else x


def _mask_array(ablation_mask, cfg: ViTConfig) -> np.ndarray:
    if ablation_mask is None:
        return np.zeros((cfg.layers, cfg.heads), dtype=bool)
    m = np.asarray(ablation_mask, dtype=bool)
    if m.shape != (cfg.layers, cfg.heads):
        raise ValueError(f"ablation mask must be {(cfg.layers, cfg.heads)}, got {m.shape}")
    return m


def forward_tensor(x, params: Mapping, cfg: ViTConfig, ablation_mask=None) -> tuple[Tensor, list[np.ndarray]]:
    """Differentiable forward; ``params`` values may be tape leaves."""
    mask = _mask_array(ablation_mask, cfg)
    Z = patch_embed(x, params, cfg)
    attns = []
    for l in range(cfg.layers):
        Z, a = block_forward(Z, _layer(params, l), cfg, mask[l] if mask[l].any() else None)
        attns.append(a)
    Z = nx.layer_norm(Z, params["lnf_g"], params["lnf_b"], cfg.ln_eps)
    return regression_head(nx.take(Z, 0, axis=1), params), attns


def forward(images, params: Mapping, cfg: ViTConfig, ablation_mask=None, *, return_attention: bool = True):
    """Predictions (B, 3) and attention (B, L, H, T, T) for preprocessed images (B, C, H', W')."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    pred, attns = forward_tensor(x, params, cfg, ablation_mask)
    if not return_attention:
        return pred.data, None
    return pred.data, np.stack(attns, axis=1)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"CHSCOPE\x00"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    cfg: ViTConfig
    meta: dict = field(default_factory=dict)

    @property
    def mean(self) -> np.ndarray:
        return np.asarray(self.meta.get("channel_mean", [0.0] * self.cfg.channels))

    @property
    def std(self) -> np.ndarray:
        return np.asarray(self.meta.get("channel_std", [1.0] * self.cfg.channels))


def save_checkpoint(params: Mapping, cfg: ViTConfig, path, meta: dict | None = None) -> Path:
    """Binary layout: magic, u32 version, u32 len + JSON config block, u32 count,
    then per tensor: u16 len + name, u8 ndim, u32 dims, raw little-endian f8."""
    shapes = param_shapes(cfg)
    if set(params) != set(shapes):
        raise CheckpointError("parameter names do not match the config")
    block = json.dumps({"vit": cfg.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", CKPT_VERSION, len(block)), block, struct.pack("<I", len(shapes))]
    for name, shape in shapes.items():
        arr = np.asarray(params[name], dtype="<f8")
        if arr.shape != shape:
            raise CheckpointError(f"{name}: shape {arr.shape} != {shape}")
        raw = name.encode()
        parts.append(struct.pack("<HB", len(raw), arr.ndim) + raw + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))
    return path


def load_checkpoint(path, expect: ViTConfig | None = None) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, nblock = struct.unpack_from("<II", buf, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 16
    block = json.loads(buf[pos : pos + nblock])
    pos += nblock
    cfg = ViTConfig.from_dict(block["vit"])
    if expect is not None and expect != cfg:
        raise CheckpointError(f"{path}: stored config differs from the expected one")
    shapes = param_shapes(cfg)
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    params = {}
    for _ in range(count):
        nlen, ndim = struct.unpack_from("<HB", buf, pos)
        pos += 3
        name = buf[pos : pos + nlen].decode()
        pos += nlen
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        if shapes.get(name) != tuple(shape):
            raise CheckpointError(f"{path}: tensor {name} has shape {shape}, config expects {shapes.get(name)}")
        size = int(np.prod(shape)) * 8
        params[name] = np.frombuffer(buf, dtype="<f8", count=size // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += size
    if set(params) != set(shapes) or pos != len(buf):
        raise CheckpointError(f"{path}: truncated or inconsistent tensor table")
    return Checkpoint(params, cfg, block.get("meta", {}))
