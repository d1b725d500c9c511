"""MSE training and evaluation of the ViT regressor."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numerics as nx
from .dataset import Dataset
from .vit import INIT_SCHEMES, Checkpoint, ViTConfig, forward, forward_tensor, init_params, is_head, is_lora

log = logging.getLogger(__name__)

TRAINABLE = ("lora_plus_head", "all")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 10
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    trainable: str = "lora_plus_head"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    init: str = "scaled"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.trainable not in TRAINABLE:
            raise ValueError(f"trainable must be one of {TRAINABLE}")
        if self.init not in INIT_SCHEMES:
            raise ValueError(f"init must be one of {INIT_SCHEMES}")


def mse_loss(pred, truth):
    """(1/N) sum_i ||y_i - yhat_i||^2; differentiable when ``pred`` is a tensor."""
    p = pred.data if isinstance(pred, nx.Tensor) else np.asarray(pred, dtype=np.float64)
    t = truth.data if isinstance(truth, nx.Tensor) else np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"mse_loss: shape mismatch {p.shape} vs {t.shape}")
    if isinstance(pred, nx.Tensor) or isinstance(truth, nx.Tensor):
        r = nx.sub(pred, truth)
        return nx.tmean(nx.tsum(nx.mul(r, r), axis=-1))
    r = p - t
    return float(np.mean(np.sum(r * r, axis=-1)))


def trainable_names(params: Mapping, mode: str) -> list[str]:
    if mode == "all":
        return list(params)
    return [k for k in params if is_lora(k) or is_head(k)]


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, g in grads.items():
            m = self.m.get(k, 0.0) * b1 + (1 - b1) * g
            v = self.v.get(k, 0.0) * b2 + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            params[k] = params[k] - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class SGD:
    def __init__(self, lr=1e-2):
        self.lr = lr

    def step(self, params: dict, grads: Mapping[str, np.ndarray]) -> None:
        for k, g in grads.items():
            params[k] = params[k] - self.lr * g


def make_optimizer(tcfg: TrainConfig):
    if tcfg.optimizer == "adam":
        return Adam(tcfg.learning_rate, tcfg.beta1, tcfg.beta2, tcfg.eps)
    return SGD(tcfg.learning_rate)


def loss_and_grads(params: Mapping, cfg: ViTConfig, x, y, names) -> tuple[float, dict[str, np.ndarray]]:
    tape = nx.Tape()
    wanted = set(names)
    leaves = {k: tape.watch(v, k) if k in wanted else nx.Tensor(v) for k, v in params.items()}
    pred, _ = forward_tensor(x, leaves, cfg)
    loss = mse_loss(pred, y)
    grads = tape.backward(loss)
    return loss.item(), {k: grads[leaves[k]] for k in names}


def predict(params: Mapping, cfg: ViTConfig, x, ablation_mask=None, batch_size: int = 32) -> np.ndarray:
    out = [
        forward(x[s : s + batch_size], params, cfg, ablation_mask, return_attention=False)[0]
        for s in range(0, len(x), batch_size)
    ]
    return np.concatenate(out, axis=0)


def _params_of(model) -> tuple[Mapping, ViTConfig]:
    if isinstance(model, Checkpoint):
        return model.params, model.cfg
    return model


def evaluate(model, data: Dataset, ablation_mask=None, batch_size: int = 32) -> float:
    """Exact dataset-mean MSE; ``model`` is a Checkpoint or (params, cfg)."""
    params, cfg = _params_of(model)
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = predict(params, cfg, data.x, ablation_mask, batch_size)
    r = pred - data.y
    return float(np.mean(np.sum(r * r, axis=1)))


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    curve: list[dict] = field(default_factory=list)


def train(
    train_data: Dataset,
    cfg: ViTConfig,
    tcfg: TrainConfig = TrainConfig(),
    *,
    val_data: Dataset | None = None,
    params: Mapping | None = None,
    meta: dict | None = None,
) -> TrainResult:
    """Minimise MSE with a seeded shuffle; row 0 of the curve is the untrained model."""
    if len(train_data) == 0:
        raise ValueError("training set is empty")
    params = dict(init_params(cfg, tcfg.seed, tcfg.init) if params is None else params)
    names = trainable_names(params, tcfg.trainable)
    opt = make_optimizer(tcfg)
    rng = np.random.default_rng(tcfg.seed)

    def row(epoch):
        r = {"epoch": epoch, "train_mse": evaluate((params, cfg), train_data, batch_size=tcfg.batch_size)}
        r["val_mse"] = evaluate((params, cfg), val_data, batch_size=tcfg.batch_size) if val_data is not None else float("nan")
        log.info("epoch %d train_mse %.6f val_mse %.6f", epoch, r["train_mse"], r["val_mse"])
        return r

    curve = [row(0)]
    for epoch in range(1, tcfg.epochs + 1):
        order = rng.permutation(len(train_data))
        for xb, yb in train_data.batches(tcfg.batch_size, order):
            try:
                _, grads = loss_and_grads(params, cfg, xb, yb, names)
            except nx.NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite values in epoch {epoch}: {exc}") from exc
            opt.step(params, grads)
        curve.append(row(epoch))
    if meta is None and train_data.manifest is not None:
        h = train_data.manifest.header
        meta = {"channel_mean": h["channel_mean"], "channel_std": h["channel_std"]}
    return TrainResult(Checkpoint(params, cfg, meta or {}), curve)


def write_curve(curve, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_mse", "val_mse"])
        for r in curve:
            w.writerow([r["epoch"], repr(float(r["train_mse"])), repr(float(r["val_mse"]))])
    return path
